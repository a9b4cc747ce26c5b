"""Command line entry point: ``huc-lab <stage> --config <path> --run-dir <path>``.

Exit codes: 0 success, 2 config validation error, 3 missing stage dependency.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import (
    STAGE_ORDER,
    ConfigError,
    MissingDependencyError,
    parse_config,
    run_all,
    run_stage,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="huc-lab", description=__doc__)
    parser.add_argument("stage", choices=STAGE_ORDER + ["all"], help="stage to run ('all' runs the full chain)")
    parser.add_argument("--config", required=True, help="path to the JSON config file")
    parser.add_argument("--run-dir", default=None, help="run directory (defaults to paths.run_dir from the config)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--force", action="store_true", help="recompute even when artifacts are up to date")
    args = parser.parse_args(argv)

    try:
        config = parse_config(args.config, seed_override=args.seed)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2

    run_dir = args.run_dir or config.run_dir
    if run_dir is None:
        print("no run directory: pass --run-dir or set paths.run_dir in the config", file=sys.stderr)
        return 2

    try:
        if args.stage == "all":
            results = run_all(config, run_dir, force=args.force)
        else:
            results = [run_stage(config, args.stage, run_dir, force=args.force)]
    except MissingDependencyError as err:
        print(err, file=sys.stderr)
        return 3
    for result in results:
        print(f"{result.stage}: {result.status}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
