"""Command-line entry point: ``calsheq {train,calibrate,baseline-bo,theory,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import ConfigurationError
from .experiment import ExperimentConfig, preset, report, run


def _load_config(args, mode: str) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        cfg.mode = mode
    else:
        cfg = preset(args.preset, mode)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.budget is not None:
        cfg.budget = args.budget
    if args.out:
        cfg.out = args.out
    return cfg


def _progress(every: int):
    def show(m, total, row):
        if m % every == 0 or m == total:
            print(f"iteration {m}/{total}  r_cal {row[3]:.3f}", file=sys.stderr, flush=True)
    return show


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calsheq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("train", "calibrate", "baseline-bo"):
        p = sub.add_parser(verb)
        p.add_argument("--config", type=Path, help="YAML experiment config (overrides --preset)")
        p.add_argument("--preset", default="desk-exp5", help="exp1..exp5 or desk-exp1..desk-exp5")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--budget", type=int, help="agent timesteps")
        p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
        p.add_argument("--no-plots", action="store_true")
        p.add_argument("--progress", type=int, default=50, help="print every N iterations (0 = quiet)")
    p = sub.add_parser("theory")
    p.add_argument("--out", type=str, default="runs/theory")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for symmetry with other verbs")
    p.add_argument("--config", type=Path, help="unused; accepted for symmetry with other verbs")
    p.add_argument("--mc-episodes", type=int, default=1_000_000)
    p = sub.add_parser("report")
    p.add_argument("--out", type=str, required=True, help="run directory")
    p.add_argument("--config", type=Path, help="unused")
    p.add_argument("--seed", type=int, help="unused")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "theory":
            from .theory.suite import run_all
            results = run_all(args.out, mc_episodes=args.mc_episodes)
            print((Path(args.out) / "theory_report.txt").read_text(), end="")
            return 0 if all(r.passed for r in results) else 1
        if args.verb == "report":
            summary = report(args.out)
            print(summary.to_text())
            return 0
        cfg = _load_config(args, args.verb)
        out = run(cfg, resume=not args.fresh, make_plots=not args.no_plots,
                  progress=_progress(args.progress) if args.progress else None)
        print(report(out).to_text())
        return 0
    except (ConfigurationError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; rerun the same command to resume from the last checkpoint", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
