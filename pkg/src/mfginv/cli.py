"""Command line entry point ``mfginv``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .pdhg import SolverAbort
from .pipeline import StageError, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

_STAGES = {
    "forward": ("forward",),
    "invert-metric": ("forward", "inverse"),
    "invert-kernel": ("forward", "inverse"),
    "bregman": ("forward", "bregman"),
    "pipeline": ("forward", "inverse", "bregman"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfginv", description="Forward and inverse mean-field games on the torus.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in _STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file or preset name")
        sp.add_argument("--seed", type=int, default=None, help="override the noise and solver seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "bregman":
            sp.add_argument("--target", choices=("metric", "kernel"), default=None)
            sp.add_argument("--outer", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.noise.seed = args.seed
        target = None
        if args.command == "invert-metric":
            target = "metric"
        elif args.command == "invert-kernel":
            target = "kernel"
        elif args.command == "bregman":
            target = args.target
            if args.outer is not None and args.outer < 1:
                raise ConfigError("--outer must be at least 1")
        res = run_pipeline(cfg, _STAGES[args.command], out=args.out, dry_run=args.dry_run,
                           target=target, outer=getattr(args, "outer", None))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, SolverAbort) as exc:
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    if args.dry_run:
        print("\n".join(res.plan))
        return EXIT_OK
    print(json.dumps({"out": str(res.out), "stages": list(_STAGES[args.command])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
