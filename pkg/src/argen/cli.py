"""Command-line entry point: ``argen <command> [--config C] [--seed S] [--out DIR] [--jobs N]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, PipelineConfig, load_config
from .pipeline import ORDER, Pipeline, PrerequisiteError
from .tensor_io import TensorFormatError

COMMANDS = ORDER + ["all"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="argen", description="Synthetic long-tail expression augmentation pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file; defaults are used when omitted")
    p.add_argument("--seed", type=int, help="overrides the config seed (default 0)")
    p.add_argument("--out", default=os.environ.get("ARGEN_OUT", "argen_out"),
                   help="output root (default: $ARGEN_OUT or ./argen_out)")
    p.add_argument("--jobs", type=int, default=1, help="worker hint; stages run single-threaded")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(path, seed) -> PipelineConfig:
    if path:
        cfg = load_config(path)
        return cfg.with_seed(seed) if seed is not None else cfg
    return PipelineConfig(seed=0 if seed is None else seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed)
        Pipeline(cfg, args.out, args.jobs).run(args.command)
    except (ConfigError, PrerequisiteError, TensorFormatError) as exc:
        print(f"argen {args.command}: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError) as exc:
        print(f"argen {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
