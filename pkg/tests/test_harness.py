import csv
import dataclasses
import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsngd import cli
from dsngd.checks import CHECKS, CheckResult, check_names, run_checks
from dsngd.exceptions import SpecError
from dsngd.gradients import DualGradientBlocks, dual_gradient_blocks
from dsngd.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    bench,
    cmd_compare,
    cmd_gen,
    cmd_run,
    generate_truth,
    read_trace_csv,
    write_trace_csv,
)
from dsngd.lexyf import GroundTruth, ModelSpec, expected_kl


# -- gen ---------------------------------------------------------------------------

def test_gen_table_mode(tmp_path):
    truth, eta = cmd_gen(3, 2, 2, "table", tmp_path / "t.json")
    assert eta is None
    d = json.loads((tmp_path / "t.json").read_text())
    assert abs(sum(d["table"]) - 1) <= 1e-12
    GroundTruth.load(tmp_path / "t.json")


def test_gen_in_model_is_self_consistent(tmp_path):
    truth, eta = cmd_gen(4, 3, 5, "in-model", tmp_path / "t.json")
    loaded = GroundTruth.load(tmp_path / "t.json")
    assert expected_kl(ModelSpec(3, 5), eta, loaded) <= 1e-10
    assert np.all(np.abs(eta.stacked()) <= 2)


def test_gen_is_byte_identical(tmp_path):
    cmd_gen(9, 3, 4, "in-model", tmp_path / "a.json")
    cmd_gen(9, 3, 4, "in-model", tmp_path / "b.json")
    cmd_gen(10, 3, 4, "in-model", tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


def test_gen_errors(tmp_path):
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError, match="file"):
        cmd_gen(1, 2, 2, "table", tmp_path / "file" / "t.json")
    with pytest.raises(SpecError):
        generate_truth(1, 1, 2, "table")
    with pytest.raises(SpecError):
        generate_truth(-1, 2, 2)
    with pytest.raises(SpecError):
        generate_truth(1, 2, 2, "other")


# -- config --------------------------------------------------------------------------

def test_config_validation_reports_everything_at_once(tmp_path):
    cfg = ExperimentConfig(s=1, m=3, algorithms=("sgd", "bogus"), steps=-1, eval_every=0, t0=0,
                           truth=str(tmp_path / "missing.json"), out=str(tmp_path))
    with pytest.raises(SpecError) as err:
        cfg.validate()
    msg = str(err.value)
    for part in ("s must be", "bogus", "steps", "eval-every", "t0", "missing.json"):
        assert part in msg


def test_config_rejects_mismatched_truth(tmp_path):
    cmd_gen(0, 3, 4, "table", tmp_path / "t.json")
    with pytest.raises(SpecError, match="has"):
        ExperimentConfig(s=2, m=4, truth=str(tmp_path / "t.json")).validate()
    with pytest.raises(SpecError, match="SNGD"):
        ExperimentConfig(s=2, m=4, class_stat="onehot", algorithms=("sngd",)).validate()


CHANGES = {
    "s": 4, "m": 5, "class_stat": "onehot", "truth": "table", "algorithms": ("dsngd",),
    "schedule": "constant", "c": 0.5, "t0": 3.0, "steps": 7, "eval_every": 3, "seed": 99, "kappa": 2.0,
    "out": "elsewhere",
}


@given(st.sets(st.sampled_from(sorted(CHANGES))))
def test_config_hash_changes_iff_a_field_changes(fields):
    base = ExperimentConfig(s=3, m=4)
    other = dataclasses.replace(base, **{f: CHANGES[f] for f in fields})
    assert (base.config_hash() == other.config_hash()) == (not fields)
    assert dataclasses.replace(base).config_hash() == base.config_hash()


def test_every_config_field_is_covered():
    assert set(CHANGES) == {f.name for f in dataclasses.fields(ExperimentConfig)}


# -- run ------------------------------------------------------------------------------

def test_run_zero_steps_single_row(tmp_path):
    res = cmd_run(ExperimentConfig(s=2, m=3, steps=0, out=str(tmp_path)))
    for r in res:
        rows = read_trace_csv(r.csv_path)
        assert len(rows) == 1 and rows[0][0] == 0


def test_run_outputs_and_shared_stream(tmp_path):
    cfg = ExperimentConfig(s=3, m=4, algorithms=("sgd", "dsngd", "sngd"), steps=3000, eval_every=500,
                           schedule="inverse-t", c=0.2, seed=5, out=str(tmp_path))
    results = cmd_run(cfg)
    hashes = set()
    for r in results:
        with open(r.csv_path) as fh:
            assert next(csv.reader(fh)) == list(CSV_COLUMNS)
        rows = read_trace_csv(r.csv_path)
        assert rows == [(t, n, k, s) for t, n, k, s in r.trace.rows()]
        meta = json.loads(r.json_path.read_text())
        assert meta["config_hash"] == cfg.config_hash() and meta["seed"] == 5
        assert meta["algorithm"] == r.algorithm and meta["diverged"] is False
        hashes.add(meta["stream_hash"])
    assert len(hashes) == 1
    summary, same = cmd_compare([r.csv_path for r in results])
    assert same and [s["algorithm"] for s in summary] == ["sgd", "dsngd", "sngd"]


def test_run_records_divergence(tmp_path):
    cfg = ExperimentConfig(s=3, m=4, algorithms=("sgd", "dsngd"), schedule="constant", c=1e6,
                           steps=200, eval_every=10, out=str(tmp_path))
    results = cmd_run(cfg)
    sgd = results[0]
    assert sgd.diverged
    meta = json.loads(sgd.json_path.read_text())
    assert meta["diverged"] is True and meta["diverged_at"] <= 200
    assert len(read_trace_csv(sgd.csv_path)) >= 1


def test_run_is_reproducible(tmp_path):
    a = cmd_run(ExperimentConfig(s=3, m=3, steps=500, eval_every=100, seed=4, out=str(tmp_path / "a")))
    b = cmd_run(ExperimentConfig(s=3, m=3, steps=500, eval_every=100, seed=4, out=str(tmp_path / "b")))
    for ra, rb in zip(a, b):
        assert [r[:3] for r in read_trace_csv(ra.csv_path)] == [r[:3] for r in read_trace_csv(rb.csv_path)]


@given(st.lists(st.tuples(st.floats(0, 50, allow_nan=False), st.floats(0, 50, allow_nan=False),
                          st.integers(0, 10**12)), max_size=20))
def test_csv_roundtrip(tmp_path_factory, rows):
    rows = [(i * 3, nll, kl, ns) for i, (nll, kl, ns) in enumerate(rows)]
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    write_trace_csv(path, rows)
    assert read_trace_csv(path) == rows


def test_read_rejects_wrong_columns(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(SpecError):
        read_trace_csv(tmp_path / "x.csv")


# -- check ------------------------------------------------------------------------------

def test_quick_is_strict_subset_of_full():
    quick, full = set(check_names("quick")), set(check_names("full"))
    assert quick < full
    assert {c.name for c in CHECKS} == full
    with pytest.raises(ValueError):
        check_names("medium")


def test_quick_check_passes_fast():
    start = time.perf_counter()
    results = run_checks("quick")
    assert time.perf_counter() - start < 30
    assert all(r.passed for r in results), [r for r in results if not r.passed]


@pytest.mark.slow
def test_full_check_passes():
    results = run_checks("full")
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_mutation_control_fails_check():
    def negated(spec, es, x):
        b = dual_gradient_blocks(spec, es, x)
        return DualGradientBlocks(-b.alpha_block, b.beta_diag, -b.d)

    results = {r.name: r for r in run_checks("quick", blocks_fn=negated)}
    assert not results["gradients.central_identity"].passed
    assert not results["gradients.dual_jacobian_fd"].passed
    assert results["geometry.crouzeix"].passed


def test_check_result_nan_fails():
    assert not CheckResult("x", float("nan"), 1.0, 1, 0.0).passed


# -- bench -----------------------------------------------------------------------------

def test_bench_small():
    res = bench(sizes=((2, 4), (3, 6)), steps=2000, warmup=200, chunk=200, oracle_budget_s=0.5)
    assert {r["algorithm"] for r in res.rows} == {"sgd", "dsngd", "sngd"}
    assert all(r["median_step_ns"] > 0 for r in res.rows)
    assert set(res.slopes) == {"sgd", "dsngd", "sngd"}
    assert set(res.ratios()) == {(2, 4), (3, 6)}


# -- CLI ----------------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    truth = tmp_path / "t.json"
    assert cli.main(["gen", "--seed", "7", "--s", "3", "--m", "4", "--out", str(truth)]) == 0
    out = tmp_path / "run"
    assert cli.main(["run", "--seed", "7", "--s", "3", "--m", "4", "--truth", str(truth), "--steps", "2000",
                     "--eval-every", "500", "--algo", "dsngd", "--algo", "sgd", "--out", str(out)]) == 0
    assert (out / "dsngd.csv").exists() and (out / "sgd.json").exists()
    assert cli.main(["compare", str(out / "dsngd.csv"), str(out / "sgd.csv")]) == 0
    assert "shared sample stream" in capsys.readouterr().out

    assert cli.main(["run", "--s", "1", "--m", "4", "--out", str(out)]) == 2
    assert cli.main(["run", "--s", "3", "--m", "4", "--truth", str(tmp_path / "nope.json")]) == 2
    assert cli.main(["run", "--s", "3", "--m", "4", "--schedule", "const", "--c", "1e6", "--steps", "100",
                     "--algo", "sgd", "--out", str(tmp_path / "div")]) == 3
    with pytest.raises(SystemExit) as err:
        cli.main(["run", "--s", "3", "--m", "4", "--algo", "adam"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        cli.main(["gen", "--seed", "-3", "--s", "3", "--m", "4", "--out", "x"])
    assert err.value.code == 2

    assert cli.main(["check", "--out", str(tmp_path / "report.json")]) == 0
    assert all(c["passed"] for c in json.loads((tmp_path / "report.json").read_text())["checks"])
    monkeypatch.setattr(cli.harness, "run_checks", lambda scale, seed: [CheckResult("x", 1.0, 0.1, 1, 0.0)])
    assert cli.main(["check"]) == 1


def test_cli_bench_writes_csv_and_slopes(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--sizes", "2x4,3x5", "--steps", "1000", "--oracle-budget", "0.2",
                     "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 6
    assert set(json.loads(out.with_suffix(".json").read_text())["slopes"]) == {"sgd", "dsngd", "sngd"}
