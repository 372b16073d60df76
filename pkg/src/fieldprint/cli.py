"""Command-line entry points for the pipeline stages."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _build_parser():
    p = argparse.ArgumentParser(
        prog="fieldprint",
        description="Implicit-field toolpath generation and collision-free "
                    "motion planning for multi-axis 3D printing.")
    p.add_argument("--config", type=Path, help="JSON config file (defaults apply)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--threads", type=int, help="BLAS/worker thread cap")
    p.add_argument("--override-digest", action="store_true",
                   help="accept artifacts whose config digest does not match")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train-sdf", "train-guidance", "train-infill", "partition",
                 "gen-waypoints", "plan-motion", "verify", "run-all"):
        sub.add_parser(name)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    level = os.environ.get("FIELDPRINT_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")

    # heavy imports after thread-count env vars are pinned
    from . import config as cfgmod
    from . import pipeline

    try:
        if args.config:
            cfg = cfgmod.load_config(args.config)
        else:
            cfg = cfgmod.validate_config({})
        if args.seed is not None:
            cfg["seed"] = args.seed
    except (OSError, json.JSONDecodeError, cfgmod.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run-all":
            pipeline.run_all(cfg, args.out, override=args.override_digest)
        else:
            pipeline.run_stage(args.command, cfg, args.out,
                               override=args.override_digest)
    except pipeline.DigestMismatch as exc:
        print(f"digest mismatch: {exc}", file=sys.stderr)
        return 3
    except pipeline.StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return 1
    except Exception:
        logging.getLogger(__name__).exception("stage crashed")
        return 1
    if args.command in ("verify", "run-all"):
        with open(args.out / "verify_report.json") as fh:
            if not json.load(fh)["pass"]:
                return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
