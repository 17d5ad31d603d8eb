"""Command line runner: ``spde-lab --experiment NAME [--config PATH] ...``.

Exit codes: 0 success, 1 configuration error, 2 numerical error (the
partial CSV then ends with a ``# error:`` record).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__
from .config import config_hash, load_config, parse_seed_range, resolve
from .errors import ConfigError, DomainError, GridMismatchError, QuadratureError
from .experiments import EXPERIMENTS

NUMERICAL_ERRORS = (ArithmeticError, QuadratureError, GridMismatchError, DomainError,
                    np.linalg.LinAlgError)


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def describe_seeds(seeds):
    """Compact ``a..b`` form for contiguous seed lists."""
    if not seeds:
        return "none"
    if seeds == list(range(seeds[0], seeds[0] + len(seeds))):
        return f"{seeds[0]}..{seeds[-1]} ({len(seeds)})"
    return ",".join(map(str, seeds)) + f" ({len(seeds)})"


class CsvSink:
    """Writes rows as they arrive; summary values go to trailing ``#`` lines."""

    def __init__(self, fh, columns):
        self.fh = fh
        self.writer = csv.writer(fh, lineterminator="\n")
        self.writer.writerow(columns)
        self.summary = {}
        fh.flush()

    def row(self, *values):
        self.writer.writerow([_fmt(v) for v in values])
        self.fh.flush()

    def note(self, key, value):
        self.summary[key] = value
        self.fh.write(f"# summary.{key}: {json.dumps(value, default=_json_default)}\n")
        self.fh.flush()


def header_lines(cfg):
    return [
        f"# spde-lab {__version__}",
        f"# experiment: {cfg['experiment']}",
        f"# config_sha256: {config_hash(cfg)}",
        f"# versions: python={platform.python_version()} numpy={np.__version__} "
        f"scipy={scipy.__version__}",
        f"# seeds: {describe_seeds(cfg['seeds'])}",
        f"# config: {json.dumps(cfg, sort_keys=True)}",
    ]


def run(cfg, out_path=None, stream=None):
    """Run a resolved config, writing CSV to ``out_path``; returns the exit status."""
    exp = EXPERIMENTS[cfg["experiment"]]
    if out_path is None:
        os.makedirs(cfg["out"], exist_ok=True)
        out_path = os.path.join(cfg["out"], f"{cfg['experiment']}.csv")
    with open(out_path, "w", newline="") as fh:
        fh.write("\n".join(header_lines(cfg)) + "\n")
        sink = CsvSink(fh, exp.columns)
        try:
            exp.func(cfg, sink)
        except ConfigError as exc:
            fh.write(f"# error: config: {exc}\n")
            print(f"config error: {exc}", file=stream or sys.stderr)
            return 1
        except NUMERICAL_ERRORS as exc:
            fh.write(f"# error: {type(exc).__name__}: {exc}\n")
            print(f"numerical error in {cfg['experiment']}: {type(exc).__name__}: {exc}",
                  file=stream or sys.stderr)
            return 2
        fh.write("# status: ok\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="spde-lab", description="Run a named numerical experiment.")
    p.add_argument("--config", metavar="PATH", help="TOML experiment configuration")
    p.add_argument("--experiment", metavar="NAME", choices=sorted(EXPERIMENTS),
                   help="experiment to run (overrides the config)")
    p.add_argument("--seed", type=int, metavar="N", help="base seed")
    p.add_argument("--seeds", metavar="N..M", help="explicit inclusive seed range")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--threads", type=int, metavar="K",
                   help="worker threads (fallback: SPDE_LAB_THREADS)")
    p.add_argument("--list", action="store_true", help="list experiments and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.list:
        for name, exp in sorted(EXPERIMENTS.items()):
            print(f"{name:20s} {exp.description}")
        return 0
    try:
        raw, loc = ({}, None)
        if args.config:
            raw, loc = load_config(args.config)
        if args.experiment:
            raw["experiment"] = args.experiment
        if "experiment" not in raw:
            raise ConfigError("no experiment given (use --experiment or 'experiment = ...')")
        if args.seed is not None:
            # a new base seed replaces any seed list from the file
            raw["seed"] = args.seed
            raw.pop("seeds", None)
        if args.seeds is not None:
            raw["seeds"] = parse_seed_range(args.seeds)
        if args.out is not None:
            raw["out"] = args.out
        if args.threads is not None:
            raw["threads"] = args.threads
        cfg = resolve(raw, loc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    status = run(cfg)
    if status == 0:
        print(os.path.join(cfg["out"], f"{cfg['experiment']}.csv"))
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
