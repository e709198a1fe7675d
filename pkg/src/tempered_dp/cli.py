"""Command line entry point: ``tempered-dp {train,sweep,curve,accountant,bounds}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from . import experiments
from .accountant import InfeasibleBudget
from .config import ConfigError, ExperimentConfig, help_for, parse_config
from .data import DataFormatError

COMMANDS = {
    "train": experiments.cmd_train,
    "sweep": experiments.cmd_sweep,
    "curve": experiments.cmd_curve,
    "accountant": experiments.cmd_accountant,
    "bounds": experiments.cmd_bounds,
}


def _add_key_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("config keys (override the --config file)")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("full", "long"):
            g.add_argument(flag, dest=f.name, action="store_const", const="true",
                           help=help_for(f.name))
        else:
            g.add_argument(flag, dest=f.name, metavar="V", help=help_for(f.name) or None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempered-dp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").split("\n")[0] or None)
        p.add_argument("--config", metavar="FILE", help="key = value file")
        _add_key_flags(p)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), cfg)
    for f in fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            cfg.set(f.name, raw)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, InfeasibleBudget, DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.command == "bounds" and not (result.ok and result.adversarial.ok):
        return 1
    if args.command == "curve" and result.dominates is False:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
