"""Command line entry point: ``fastattrib <stage> [--config FILE] [--run-dir DIR]``.

Exit codes: 0 success, 2 configuration error, 3 precondition or hash
mismatch, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

STAGE_NAMES = ["make-data", "train-model", "gen-queries", "fit-encoder", "fit-fisher", "curate",
               "train-ranker", "eval-rank", "eval-counterfactual", "bench", "report"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastattrib", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=STAGE_NAMES + ["all"],
                   help="pipeline stage to run; 'all' runs every stage in order")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--run-dir", default=os.environ.get("FASTATTRIB_RUN_DIR", "runs/default"),
                   help="artifact directory (default: $FASTATTRIB_RUN_DIR or runs/default)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("--force", action="store_true", help="rebuild even when up to date")
    p.add_argument("--quiet", action="store_true", help="suppress JSON progress lines")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        # only effective before numpy loads its BLAS, hence the late imports below
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .config import ConfigError, load_config
    from .numerics import NumericError, PreconditionError
    from .pipeline import ORDER, Context, log_event, run_stage

    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as e:
        log_event("error", kind="config", message=str(e))
        return 2
    ctx = Context(cfg, Path(args.run_dir), quiet=args.quiet)
    stages = ORDER if args.stage == "all" else [args.stage]
    try:
        for s in stages:
            status = run_stage(ctx, s, force=args.force)
            print(f"{s}: {status}")
    except ConfigError as e:
        log_event("error", kind="config", message=str(e))
        return 2
    except PreconditionError as e:
        log_event("error", kind="precondition", message=str(e))
        print(str(e), file=sys.stderr)
        return 3
    except NumericError as e:
        log_event("error", kind="numeric", message=str(e))
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
