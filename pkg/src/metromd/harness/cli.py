"""Command-line entry point: ``metromd <experiment> --config <path> [options]``.

Exit status is 0 on success, 2 for an invalid configuration and 3 when a
Metropolized chain violates an invariant (energy blow-up, constraint solver
failures, constraint drift).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import EXPERIMENTS, ConfigError, load_config, with_overrides
from .runners import InvariantViolation, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def build_parser():
    ap = argparse.ArgumentParser(prog="metromd", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="key = value configuration file")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("--samples", type=int, help="override the sample budget")
    ap.add_argument("--jobs", type=int, default=1, help="legs to run in parallel")
    ap.add_argument("--plot", action="store_true", help="also write SVG log-log plots")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage, which matches our validation code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.experiment)
        cfg = with_overrides(cfg, seed=args.seed, samples=args.samples)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except (ConfigError, TypeError) as exc:
        print(f"metromd: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_experiment(cfg, args.out, jobs=args.jobs)
    except InvariantViolation as exc:
        print(f"metromd: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    if args.plot:
        from .plot import plot_report

        try:
            plot_report(report)
        except RuntimeError as exc:
            print(f"metromd: {exc}", file=sys.stderr)
    json.dump({"experiment": report.experiment, "out": str(report.out_dir), "ok": report.ok,
               "violations": report.violations, "wall_clock_s": round(report.wall_clock_s, 2)},
              sys.stdout, indent=2)
    sys.stdout.write("\n")
    if not report.ok:
        for v in report.violations:
            print(f"metromd: invariant violated: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
