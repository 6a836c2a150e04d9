"""Command line entry points: run experiments, verify metrics, build tables."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import io as pio
from .harness import (
    FULL_BOOTSTRAP_N,
    PLOT_KINDS,
    RunRecord,
    emit_plotdata,
    emit_table,
    load_config,
    recompute_metrics,
    run_experiment,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pai",
        description="Parallel MCMC with GP subposterior surrogates and active learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured experiment grid")
    run.add_argument("--config", required=True, help="flat key=value config file")
    run.add_argument("--method", action="append", default=None, help="override method list")
    run.add_argument("--seed", action="append", type=int, default=None, help="override seeds")
    run.add_argument("--out-dir", default=None, help="override output directory")
    run.add_argument("--workers", type=int, default=None, help="node worker threads")
    run.add_argument("--no-share", action="store_true", help="disable the sharing stage")
    run.add_argument("--no-refine", action="store_true", help="disable active refinement")
    run.add_argument(
        "--full-bootstrap",
        action="store_true",
        help=f"use {FULL_BOOTSTRAP_N} bootstrap resamples for the summary",
    )

    met = sub.add_parser("metrics", help="recompute metrics from persisted samples")
    met.add_argument("--run-dir", required=True)

    tab = sub.add_parser("table", help="aggregate summary tables across run dirs")
    tab.add_argument("--run-dirs", nargs="+", required=True)
    tab.add_argument("--n-boot", type=int, default=10_000)
    tab.add_argument("--alpha", type=float, default=0.05)

    plot = sub.add_parser("plotdata", help="emit plot-ready paired sample columns")
    plot.add_argument("--run-dir", required=True)
    plot.add_argument("--kind", required=True, choices=PLOT_KINDS)
    plot.add_argument("--method", required=True)
    plot.add_argument("--seed", type=int, required=True)
    plot.add_argument("--out", default=None)
    return parser


def _cmd_run(args) -> int:
    overrides = {}
    if args.method:
        overrides["methods"] = tuple(args.method)
    if args.seed:
        overrides["seeds"] = tuple(args.seed)
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.no_share:
        overrides["share"] = False
    if args.no_refine:
        overrides["refine"] = False
    if args.full_bootstrap:
        overrides["n_boot"] = FULL_BOOTSTRAP_N
    cfg = load_config(args.config, **overrides)
    result = run_experiment(cfg)
    print(result.table)
    for rec in result.failed:
        print(f"FAILED {rec.method} seed={rec.seed}: {rec.error}", file=sys.stderr)
    print(f"artifacts: {result.out_dir}")
    return 1 if result.failed else 0


def _cmd_metrics(args) -> int:
    rows = recompute_metrics(args.run_dir)
    if not rows:
        print("no completed runs found", file=sys.stderr)
        return 1
    print("method\tseed\tmmtv\tw2\tgskl\tstored_match")
    bad = 0
    for row in rows:
        print(
            f"{row['method']}\t{row['seed']}\t{row['mmtv']!r}\t{row['w2']!r}"
            f"\t{row['gskl']!r}\t{row['stored_match']}"
        )
        bad += not row["stored_match"]
    return 1 if bad else 0


def _cmd_table(args) -> int:
    records = []
    for d in args.run_dirs:
        for rec_path in sorted(Path(d).glob("seed*/*/record.json")):
            records.append(RunRecord.from_json(pio.read_json(rec_path)))
    if not records:
        print("no run records found", file=sys.stderr)
        return 1
    text, _ = emit_table(records, n_boot=args.n_boot, alpha=args.alpha)
    print(text)
    return 0


def _cmd_plotdata(args) -> int:
    dest = emit_plotdata(args.run_dir, args.method, args.seed, args.kind, dest=args.out)
    print(dest)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "metrics": _cmd_metrics,
        "table": _cmd_table,
        "plotdata": _cmd_plotdata,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
