"""Experiment plumbing: ground-truth generation, runs, checks, timing, comparison.

Every command returns plain Python data and writes its files; the argparse
front end in :mod:`dsngd.cli` only maps errors to exit codes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checks import format_report, run_checks
from .exceptions import DivergenceError, SpecError
from .lexyf import CLASS_STATS, GroundTruth, ModelSpec, random_natural
from .optimizers import (
    ALGORITHMS,
    DIVERGENCE_GUARD,
    SCHEDULES,
    RunTrace,
    Schedule,
    _Runner,
    draw_stream,
    run,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "expected_nll", "expected_kl", "step_time_ns")
TRUTH_MODES = ("in-model", "table")
TRUTH_KEY = 0
U64_MAX = 2 ** 64 - 1

# s * t runs over 10 .. 2000
DEFAULT_BENCH_SIZES = ((2, 6), (2, 16), (4, 26), (5, 61), (10, 101), (20, 101))


# -- ground truth -------------------------------------------------------------

def _check_seed(seed):
    if isinstance(seed, bool) or int(seed) != seed or not 0 <= seed <= U64_MAX:
        raise SpecError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


def generate_truth(seed, s, m, mode="in-model", class_stat="minimal"):
    """Draw a ground truth; returns ``(truth, eta)`` with ``eta`` None in table mode.

    In-model truths come from natural parameters uniform on ``[-2, 2]``;
    table truths are Dirichlet(1) over all cells.
    """
    seed = _check_seed(seed)
    if mode not in TRUTH_MODES:
        raise SpecError(f"mode must be one of {TRUTH_MODES}, got {mode!r}")
    rng = np.random.default_rng([seed, TRUTH_KEY])
    if mode == "table":
        if int(s) != s or int(m) != m or s < 2 or m < 2:
            raise SpecError(f"s and m must be integers >= 2, got s={s}, m={m}")
        return GroundTruth.random_table(int(s), int(m), rng), None
    spec = ModelSpec(s, m, class_stat)
    eta = random_natural(spec, rng)
    return GroundTruth.from_model(spec, eta), eta


def cmd_gen(seed, s, m, mode, out, class_stat="minimal"):
    truth, eta = generate_truth(seed, s, m, mode, class_stat)
    path = Path(out)
    try:
        if path.parent != Path("."):
            path.parent.mkdir(parents=True, exist_ok=True)
        truth.save(path)
    except OSError as exc:
        raise OSError(f"cannot write ground truth to {path}: {exc}") from exc
    return truth, eta


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    s: int
    m: int
    class_stat: str = "minimal"
    truth: str = "in-model"          # a JSON path, "in-model" or "table"
    algorithms: tuple = ("sgd", "dsngd")
    schedule: str = "inverse-t"
    c: float = 1.0
    t0: float = 10.0
    steps: int = 100_000
    eval_every: int = 1000
    seed: int = 0
    kappa: float = 1.0
    out: str = "runs"

    def validate(self) -> "ExperimentConfig":
        """Raise a single :class:`SpecError` listing every problem."""
        problems = []
        for name in ("s", "m"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 2:
                problems.append(f"{name} must be an integer >= 2 (got {v!r})")
        if self.class_stat not in ("minimal", "onehot"):
            problems.append(f"class statistic must be minimal or onehot (got {self.class_stat!r})")
        if not self.algorithms:
            problems.append("at least one algorithm is required")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                problems.append(f"unknown algorithm {a!r}")
        if len(set(self.algorithms)) != len(self.algorithms):
            problems.append("algorithms are repeated")
        if "sngd" in self.algorithms and self.class_stat == "onehot":
            problems.append("the SNGD oracle needs the minimal class statistic")
        try:
            Schedule(self.schedule, self.c, self.t0)
        except SpecError as exc:
            problems.append(str(exc))
        if isinstance(self.steps, bool) or int(self.steps) != self.steps or self.steps < 0:
            problems.append(f"steps must be a non-negative integer (got {self.steps!r})")
        if isinstance(self.eval_every, bool) or int(self.eval_every) != self.eval_every or self.eval_every < 1:
            problems.append(f"eval-every must be a positive integer (got {self.eval_every!r})")
        try:
            _check_seed(self.seed)
        except (SpecError, TypeError, ValueError) as exc:
            problems.append(str(exc))
        if not self.kappa > 0:
            problems.append(f"kappa must be positive (got {self.kappa!r})")
        if self.truth not in TRUTH_MODES:
            path = Path(self.truth)
            if not path.is_file():
                problems.append(f"ground-truth file {path} does not exist")
            else:
                try:
                    truth = GroundTruth.load(path)
                    if (truth.m, truth.s) != (self.m, self.s):
                        problems.append(f"ground truth {path} has (s, m) = ({truth.s}, {truth.m}), "
                                        f"config has ({self.s}, {self.m})")
                except (SpecError, ValueError, KeyError, OSError) as exc:
                    problems.append(f"ground-truth file {path} is invalid: {exc}")
        if problems:
            raise SpecError("invalid experiment config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algorithms"] = list(self.algorithms)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.s, self.m, self.class_stat)

    def load_truth(self) -> GroundTruth:
        if self.truth in TRUTH_MODES:
            return generate_truth(self.seed, self.s, self.m, self.truth, self.class_stat)[0]
        return GroundTruth.load(self.truth)


# -- traces on disk -------------------------------------------------------------

def _format_row(row):
    t, nll, kl, ns = row
    return [str(int(t)), repr(float(nll)), repr(float(kl)), str(int(ns))]


def write_trace_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(_format_row(row))


def read_trace_csv(path):
    """Rows ``(t, expected_nll, expected_kl, step_time_ns)``; exact inverse of the writer."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise SpecError(f"{path}: expected columns {','.join(CSV_COLUMNS)}, got {header}")
        return [(int(t), float(nll), float(kl), int(ns)) for t, nll, kl, ns in reader]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunResult:
    algorithm: str
    csv_path: Path
    json_path: Path
    trace: RunTrace
    diverged: bool = False


def cmd_run(config: ExperimentConfig):
    """Run every configured algorithm on one shared sample stream.

    Writes ``<out>/<algorithm>.csv`` (rows appended as they are evaluated) and
    ``<out>/<algorithm>.json``.  A diverging algorithm keeps its partial trace,
    flagged ``"diverged": true``; the remaining algorithms still run.
    """
    config.validate()
    spec, truth = config.spec, config.load_truth()
    schedule = Schedule(config.schedule, config.c, config.t0)
    stream = draw_stream(truth, config.steps, config.seed)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    base_meta = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "truth_hash": hashlib.sha256(truth.to_json().encode()).hexdigest(),
    }
    results = []
    for algo in config.algorithms:
        csv_path, json_path = out / f"{algo}.csv", out / f"{algo}.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)

            def on_row(row):
                writer.writerow(_format_row(row))
                fh.flush()

            try:
                trace = run(spec, algo, schedule, truth, config.steps, config.eval_every, config.seed,
                            kappa=config.kappa, stream=stream, metadata=dict(base_meta), on_row=on_row)
                diverged = False
            except DivergenceError as exc:
                trace, diverged = exc.trace, True
        _write_json(json_path, trace.metadata)
        results.append(RunResult(algo, csv_path, json_path, trace, diverged))
    return results


def cmd_check(scale="quick", seed=0, out=None):
    results = run_checks(scale, seed)
    report = format_report(results)
    if out is not None:
        _write_json(out, {"scale": scale, "seed": seed,
                          "checks": [dict(asdict(r), passed=r.passed) for r in results]})
    return results, report


# -- timing -------------------------------------------------------------------

@dataclass
class BenchResult:
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)

    def ratios(self):
        """DSNGD / SGD median step time at each size."""
        by = {(r["s"], r["m"], r["algorithm"]): r["median_step_ns"] for r in self.rows}
        return {(s, m): by[(s, m, "dsngd")] / by[(s, m, "sgd")]
                for (s, m, a) in by if a == "sgd" and (s, m, "dsngd") in by}


def _time_chunks(runner, xs, ys, gammas, warmup, chunk):
    """Median per-step time over equal chunks after a discarded warm-up."""
    runner.chunk(xs[:warmup], ys[:warmup], gammas[:warmup])
    times = []
    for start in range(warmup, len(xs), chunk):
        sl = slice(start, start + chunk)
        t0 = time.perf_counter_ns()
        done, bad = runner.chunk(xs[sl], ys[sl], gammas[sl])
        times.append((time.perf_counter_ns() - t0) / done)
        if bad:
            runner.reset()
    return float(np.median(times)), len(xs) - warmup


def _time_oracle(runner, xs, ys, gammas, max_steps, budget_s):
    """Per-step times of the exact-Fisher step, one step at a time, within a time budget."""
    times = []
    deadline = time.perf_counter() + budget_s
    runner.sngd_one(int(xs[0]), int(ys[0]), gammas[0])  # warm-up
    for n in range(1, max_steps + 1):
        t0 = time.perf_counter_ns()
        try:
            runner.sngd_one(int(xs[n]), int(ys[n]), gammas[n])
        except np.linalg.LinAlgError:
            runner.reset()
        times.append(time.perf_counter_ns() - t0)
        eta = runner.eta
        if not np.all(np.isfinite(eta)) or np.max(np.abs(eta)) > DIVERGENCE_GUARD:
            runner.reset()
        if time.perf_counter() > deadline and len(times) >= 5:
            break
    return float(np.median(times)), len(times)


def bench(sizes=DEFAULT_BENCH_SIZES, steps=10_000, warmup=1000, chunk=500, seed=0,
          oracle_budget_s=10.0, algorithms=ALGORITHMS, rounds=3):
    """Median per-step wall time of each algorithm at each ``(s, m)``, plus log-log slopes vs dimension.

    The compiled algorithms are timed in ``rounds`` interleaved rounds of
    ``steps`` steps each; the fastest round's median is kept, which filters
    out interference from other processes.
    """
    result = BenchResult()
    for s, m in sizes:
        spec = ModelSpec(s, m)
        truth, _ = generate_truth(seed, s, m, "table")
        xs, ys = draw_stream(truth, warmup + steps + 1, seed)
        gammas = Schedule().values(0, warmup + steps + 1)
        timed = {}
        for _ in range(rounds):
            for algo in algorithms:
                if algo == "sngd":
                    continue
                med, n = _time_chunks(_Runner(spec, algo, 1.0), xs, ys, gammas, warmup, chunk)
                best = timed.get(algo, (np.inf, 0))
                timed[algo] = (min(best[0], med), best[1] + n)
        if "sngd" in algorithms:
            timed["sngd"] = _time_oracle(_Runner(spec, "sngd", 1.0), xs, ys, gammas, steps, oracle_budget_s)
        for algo in algorithms:
            med, n = timed[algo]
            result.rows.append({"s": s, "m": m, "dim": spec.dim, "algorithm": algo,
                                "median_step_ns": med, "timed_steps": n})
            logger.info("bench s=%d m=%d %s: %.0f ns/step over %d steps", s, m, algo, med, n)
    for algo in algorithms:
        pts = [(r["dim"], r["median_step_ns"]) for r in result.rows if r["algorithm"] == algo]
        if len(pts) >= 2:
            d, t = np.log(np.array(pts, dtype=float)).T
            result.slopes[algo] = float(np.polyfit(d, t, 1)[0])
    return result


def cmd_bench(sizes=DEFAULT_BENCH_SIZES, out=None, **kwargs):
    for s, m in sizes:
        ModelSpec(s, m)
    result = bench(sizes, **kwargs)
    if out is not None:
        path = Path(out)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["s", "m", "dim", "algorithm", "median_step_ns", "timed_steps"])
            w.writeheader()
            w.writerows(result.rows)
        _write_json(path.with_suffix(".json"), {
            "slopes": result.slopes,
            "ratios": {f"{s}x{m}": r for (s, m), r in result.ratios().items()},
            "settings": {k: v for k, v in kwargs.items()},
        })
    return result


# -- comparison -----------------------------------------------------------------

def cmd_compare(paths):
    """Summarise trace CSVs; stream hashes from the JSON sidecars must agree."""
    summary, hashes = [], set()
    for p in map(Path, paths):
        rows = read_trace_csv(p)
        meta_path = p.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        if "stream_hash" in meta:
            hashes.add(meta["stream_hash"])
        last = rows[-1]
        times = [r[3] for r in rows[1:]]
        summary.append({
            "file": str(p), "algorithm": meta.get("algorithm", p.stem), "t": last[0],
            "expected_nll": last[1], "expected_kl": last[2],
            "median_step_ns": float(np.median(times)) if times else 0.0,
            "diverged": bool(meta.get("diverged", False)),
        })
    return summary, len(hashes) <= 1


def format_compare(summary, same_stream) -> str:
    lines = [f"{'algorithm':10s} {'t':>9s} {'expected_nll':>14s} {'expected_kl':>12s} {'ns/step':>10s}"]
    for r in summary:
        flag = "  diverged" if r["diverged"] else ""
        lines.append(f"{r['algorithm']:10s} {r['t']:9d} {r['expected_nll']:14.6f} {r['expected_kl']:12.4e} "
                     f"{r['median_step_ns']:10.0f}{flag}")
    lines.append("shared sample stream" if same_stream else "WARNING: traces used different sample streams")
    return "\n".join(lines)


__all__ = [
    "CLASS_STATS", "SCHEDULES", "ExperimentConfig", "RunResult", "BenchResult", "generate_truth",
    "cmd_gen", "cmd_run", "cmd_check", "cmd_bench", "cmd_compare", "bench", "read_trace_csv",
    "write_trace_csv", "format_compare",
]
