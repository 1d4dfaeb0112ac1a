"""``scorebench`` command line.

Exit codes: 0 success, 1 identity check failed, 2 config error,
3 numerical failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources

import numpy as np
from threadpoolctl import threadpool_limits

from ..estimators import IntegrandError
from ..scorenet import TrainingDiverged
from . import commands
from .config import ConfigError, load_config

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3, 4


def preset_path(name: str):
    """Path of a shipped preset config (``fig4_small`` etc.)."""
    p = resources.files("scorebench.bench") / "presets" / f"{name}.json"
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return p


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorebench", description="Score-based ISAC metric experiments.")
    p.add_argument("command", choices=commands.COMMANDS)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="experiment config (JSON)")
    src.add_argument("--preset", help="shipped preset name, e.g. fig4_small")
    p.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override, repeatable")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bitwise reproducibility)")
    p.add_argument("--quiet", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        path = preset_path(args.preset) if args.preset else args.config
        cfg = load_config(path, command=args.command, overrides=args.override, seed=args.seed, out=args.out)
        with threadpool_limits(limits=max(1, args.threads)), np.errstate(over="ignore", under="ignore"):
            if args.command == "train":
                commands.cmd_train(cfg, log)
            elif args.command == "identities":
                commands.cmd_identities(cfg, log)
            elif args.command == "scene-info":
                commands.cmd_scene_info(cfg, log)
            else:
                commands.cmd_eval(cfg, args.command, log)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except commands.MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except commands.ChecksFailed as e:
        print(f"check failure: {e}", file=sys.stderr)
        return EXIT_CHECKS
    except (TrainingDiverged, IntegrandError, FloatingPointError, np.linalg.LinAlgError, ValueError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
