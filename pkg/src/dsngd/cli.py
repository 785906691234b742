"""Command line front end.

Exit codes: 0 success, 1 check failure, 2 config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .exceptions import SpecError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

SCHEDULE_NAMES = {"const": "constant", "inv-t": "inverse-t", "inv-sqrt": "inverse-sqrt-t"}


def _seed(text):
    v = int(text)
    if not 0 <= v <= harness.U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer: {text}")
    return v


def _sizes(text):
    try:
        sizes = [tuple(int(v) for v in item.lower().split("x")) for item in text.split(",") if item]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes look like 2x6,4x26: {text!r}") from None
    if not sizes or any(len(sz) != 2 for sz in sizes):
        raise argparse.ArgumentTypeError(f"sizes look like 2x6,4x26: {text!r}")
    return sizes


def build_parser():
    # argparse exits with status 2 on bad arguments, which is also the config-error code
    p = argparse.ArgumentParser(prog="dsngd", description="DSNGD, SGD and exact natural-gradient runs on discrete XY families.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, need_size=True):
        sp.add_argument("--seed", type=_seed, default=0)
        sp.add_argument("--s", type=int, required=need_size, default=None, help="number of classes")
        sp.add_argument("--m", type=int, required=need_size, default=None, help="feature domain size")
        sp.add_argument("--stat", choices=("minimal", "onehot"), default="minimal")

    g = sub.add_parser("gen", help="write a ground-truth table")
    model_args(g)
    g.add_argument("--mode", choices=harness.TRUTH_MODES, default="in-model")
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run optimizers on one shared sample stream")
    model_args(r)
    r.add_argument("--algo", action="append", choices=("sgd", "dsngd", "sngd"),
                   help="repeatable; default sgd and dsngd")
    r.add_argument("--steps", type=int, default=100_000)
    r.add_argument("--eval-every", type=int, default=1000)
    r.add_argument("--schedule", choices=tuple(SCHEDULE_NAMES), default="inv-t")
    r.add_argument("--c", type=float, default=1.0)
    r.add_argument("--t0", type=float, default=10.0)
    r.add_argument("--kappa", type=float, default=1.0)
    r.add_argument("--truth", default=None, help="ground-truth JSON; otherwise generated from --seed")
    r.add_argument("--truth-mode", choices=harness.TRUTH_MODES, default="in-model")
    r.add_argument("--out", default="runs", help="output directory")

    c = sub.add_parser("check", help="run the invariant suite")
    c.add_argument("--scale", choices=("quick", "full"), default="quick")
    c.add_argument("--seed", type=_seed, default=0)
    c.add_argument("--out", default=None, help="optional JSON report")

    b = sub.add_parser("bench", help="per-step wall time vs model size")
    b.add_argument("--sizes", type=_sizes, default=list(harness.DEFAULT_BENCH_SIZES), help="e.g. 2x6,4x26")
    b.add_argument("--steps", type=int, default=10_000)
    b.add_argument("--seed", type=_seed, default=0)
    b.add_argument("--oracle-budget", type=float, default=10.0, help="seconds of exact-Fisher steps per size")
    b.add_argument("--out", default=None, help="CSV path; slopes go to the .json next to it")

    cmp_ = sub.add_parser("compare", help="summarise trace CSVs")
    cmp_.add_argument("traces", nargs="+")
    return p


def _cmd_gen(a):
    truth, _ = harness.cmd_gen(a.seed, a.s, a.m, a.mode, a.out, a.stat)
    print(f"wrote {a.out} (s={truth.s}, m={truth.m})")
    return EXIT_OK


def _cmd_run(a):
    cfg = harness.ExperimentConfig(
        s=a.s, m=a.m, class_stat=a.stat, truth=a.truth or a.truth_mode,
        algorithms=tuple(a.algo or ("sgd", "dsngd")), schedule=SCHEDULE_NAMES[a.schedule],
        c=a.c, t0=a.t0, steps=a.steps, eval_every=a.eval_every, seed=a.seed, kappa=a.kappa, out=a.out)
    results = harness.cmd_run(cfg)
    for res in results:
        last = res.trace.rows()[-1]
        state = "DIVERGED" if res.diverged else "ok"
        print(f"{res.algorithm:6s} t={last[0]:<9d} expected_kl={last[2]:.4e} {state}  -> {res.csv_path}")
    return EXIT_DIVERGED if any(r.diverged for r in results) else EXIT_OK


def _cmd_check(a):
    results, report = harness.cmd_check(a.scale, a.seed, a.out)
    print(report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _cmd_bench(a):
    res = harness.cmd_bench(a.sizes, out=a.out, steps=a.steps, seed=a.seed, oracle_budget_s=a.oracle_budget)
    print(f"{'s':>3s} {'m':>4s} {'dim':>5s} {'algorithm':9s} {'ns/step':>12s}")
    for r in res.rows:
        print(f"{r['s']:3d} {r['m']:4d} {r['dim']:5d} {r['algorithm']:9s} {r['median_step_ns']:12.0f}")
    for (s, m), ratio in res.ratios().items():
        print(f"dsngd/sgd at {s}x{m}: {ratio:.2f}")
    for algo, slope in res.slopes.items():
        print(f"log-log slope {algo}: {slope:.3f}")
    return EXIT_OK


def _cmd_compare(a):
    summary, same = harness.cmd_compare(a.traces)
    print(harness.format_compare(summary, same))
    return EXIT_OK


COMMANDS = {"gen": _cmd_gen, "run": _cmd_run, "check": _cmd_check, "bench": _cmd_bench,
            "compare": _cmd_compare}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SpecError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
