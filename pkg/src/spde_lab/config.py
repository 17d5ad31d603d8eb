"""Experiment configuration: TOML input, validation and resolution.

A configuration file looks like::

    experiment = "malliavin-compare"
    seed = 0            # base seed
    n_seeds = 200       # or: seeds = [0, 1, 2] / seeds = "0..199"
    out = "results"
    threads = 1

    [grid]
    T = 1.0
    nt = 512
    nx = 64

    [drift]
    name = "arctan"
    amplitude = 1.0

    [direction]
    name = "bump"
    center = [0.3, 0.5]

    [params]
    n_paths = 2000

Every key is checked against the defaults of the chosen experiment; unknown
keys and type mismatches raise :class:`ConfigError` naming the field and,
when the input came from a file, its line.
"""
from __future__ import annotations

import copy
import hashlib
import inspect
import json
import os
import re

from .drift_ladder import arctan_drift, comb_drift, sign_drift, smooth_sine, step_drift
from .errors import ConfigError
from .spde_solver import constant_drift, zero_drift

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

TOP_LEVEL = ("experiment", "seed", "n_seeds", "seeds", "threads", "out",
             "grid", "drift", "direction", "params")
GRID_KEYS = {"T": float, "nt": int, "nx": int}
DRIFT_MAKERS = {"sign": sign_drift, "step": step_drift, "comb": comb_drift,
                "smooth-sine": smooth_sine, "arctan": arctan_drift, "zero": zero_drift,
                "constant": constant_drift}
DIRECTION_KEYS = {"bump": {"center": list, "width": list, "unit": bool},
                  "constant": {"value": float}}
THREADS_ENV = "SPDE_LAB_THREADS"


class _Locator:
    """Maps ``section.key`` to a line number of the TOML source."""

    def __init__(self, text=None, path=None):
        self.path = path
        self.lines = {}
        if text is None:
            return
        section = ""
        for no, line in enumerate(text.splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            head = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]$", stripped)
            if head:
                section = head.group(1)
                self.lines.setdefault(section, no)
                continue
            m = re.match(r"^([A-Za-z0-9_-]+)\s*=", stripped)
            if m:
                self.lines.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), no)

    def where(self, field):
        no = self.lines.get(field)
        if no is None and "." in field:
            no = self.lines.get(field.rsplit(".", 1)[0])
        prefix = self.path or "config"
        return f"{prefix}:{no}: " if no else f"{prefix}: "

    def error(self, field, message):
        return ConfigError(f"{self.where(field)}{field}: {message}")


def load_config(path):
    """Read a TOML file into a raw dict, keeping a locator for diagnostics."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    text = data.decode("utf-8", errors="replace")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return raw, _Locator(text, str(path))


def parse_seed_range(text):
    """``"N..M"`` (inclusive) to a list of seeds."""
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", str(text))
    if not m:
        raise ConfigError(f"seeds: expected N..M, got {text!r}")
    lo, hi = int(m.group(1)), int(m.group(2))
    if hi < lo:
        raise ConfigError(f"seeds: empty range {text!r}")
    return list(range(lo, hi + 1))


def _coerce(value, kind, field, loc):
    if kind is bool:
        if not isinstance(value, bool):
            raise loc.error(field, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise loc.error(field, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise loc.error(field, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise loc.error(field, f"expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise loc.error(field, f"expected a list, got {value!r}")
        return copy.deepcopy(value)
    raise AssertionError(kind)


def _section(raw, name, loc):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise loc.error(name, "expected a table")
    return sec


def _resolve_drift(sec, default, loc):
    out = dict(default)
    if "name" in sec and sec["name"] != default.get("name"):
        out = {}
    out.update(sec)
    name = out.get("name")
    if name not in DRIFT_MAKERS:
        raise loc.error("drift.name", f"unknown drift {name!r}; choose from {sorted(DRIFT_MAKERS)}")
    sig = inspect.signature(DRIFT_MAKERS[name]).parameters
    for key, value in list(out.items()):
        if key == "name":
            continue
        if key == "mollify":
            out[key] = _coerce(value, int, "drift.mollify", loc)
            if out[key] < 0:
                raise loc.error("drift.mollify", "must be non-negative")
            continue
        if key not in sig:
            raise loc.error(f"drift.{key}",
                            f"unknown key for drift {name!r}; allowed: {sorted(sig) + ['mollify']}")
        out[key] = _coerce(value, int if key == "level" else float, f"drift.{key}", loc)
    return out


def _resolve_direction(sec, default, loc):
    out = dict(default)
    if "name" in sec and sec["name"] != default.get("name"):
        out = {}
    out.update(sec)
    name = out.get("name")
    if name not in DIRECTION_KEYS:
        raise loc.error("direction.name",
                        f"unknown direction {name!r}; choose from {sorted(DIRECTION_KEYS)}")
    allowed = DIRECTION_KEYS[name]
    for key, value in list(out.items()):
        if key == "name":
            continue
        if key not in allowed:
            raise loc.error(f"direction.{key}",
                            f"unknown key for direction {name!r}; allowed: {sorted(allowed)}")
        out[key] = _coerce(value, allowed[key], f"direction.{key}", loc)
        if allowed[key] is list and (len(out[key]) != 2
                                     or not all(isinstance(v, (int, float)) for v in out[key])):
            raise loc.error(f"direction.{key}", "expected two numbers")
    return out


def _default_threads():
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        k = int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected an integer, got {env!r}") from None
    if k < 1:
        raise ConfigError(f"{THREADS_ENV}: must be at least 1")
    return k


def resolve(raw, locator=None):
    """Validate ``raw`` against the experiment defaults and fill in the rest.

    Returns
    -------
    dict
        Keys ``experiment``, ``seed``, ``n_seeds``, ``seeds``, ``threads``,
        ``out``, ``params`` and, when the experiment uses them, ``grid``,
        ``drift`` and ``direction``.
    """
    from .experiments import EXPERIMENTS

    loc = locator or _Locator()
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    for key in raw:
        if key not in TOP_LEVEL:
            raise loc.error(key, f"unknown key; allowed: {', '.join(TOP_LEVEL)}")
    name = raw.get("experiment")
    if name not in EXPERIMENTS:
        raise loc.error("experiment", f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    exp = EXPERIMENTS[name]

    cfg = {"experiment": name}
    cfg["seed"] = _coerce(raw.get("seed", 0), int, "seed", loc)
    if cfg["seed"] < 0:
        raise loc.error("seed", "must be non-negative")
    n_seeds = _coerce(raw.get("n_seeds", exp.n_seeds), int, "n_seeds", loc)
    if n_seeds < 0:
        raise loc.error("n_seeds", "must be non-negative")
    seeds = raw.get("seeds")
    if seeds is None:
        seeds = list(range(cfg["seed"], cfg["seed"] + n_seeds))
    elif isinstance(seeds, str):
        try:
            seeds = parse_seed_range(seeds)
        except ConfigError as exc:
            raise loc.error("seeds", str(exc).split(": ", 1)[1]) from None
    elif isinstance(seeds, list):
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise loc.error("seeds", "expected non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise loc.error("seeds", "duplicate seeds")
    else:
        raise loc.error("seeds", f"expected a list or 'N..M', got {seeds!r}")
    cfg["seeds"] = list(seeds)
    cfg["n_seeds"] = len(cfg["seeds"])
    if exp.n_seeds and not cfg["seeds"]:
        raise loc.error("seeds", "experiment needs at least one seed")
    threads = raw.get("threads")
    cfg["threads"] = _default_threads() if threads is None else _coerce(threads, int, "threads", loc)
    if cfg["threads"] < 1:
        raise loc.error("threads", "must be at least 1")
    cfg["out"] = _coerce(raw.get("out", "results"), str, "out", loc)

    for section, default in (("grid", exp.grid), ("drift", exp.drift), ("direction", exp.direction)):
        if default is None:
            if section in raw:
                raise loc.error(section, f"experiment {name!r} takes no [{section}] table")
            continue
        sec = _section(raw, section, loc)
        if section == "grid":
            out = dict(default)
            for key, value in sec.items():
                if key not in GRID_KEYS:
                    raise loc.error(f"grid.{key}", f"unknown key; allowed: {sorted(GRID_KEYS)}")
                out[key] = _coerce(value, GRID_KEYS[key], f"grid.{key}", loc)
            if not (out["T"] > 0 and out["nt"] >= 1 and out["nx"] >= 2):
                raise loc.error("grid", "need T > 0, nt >= 1 and nx >= 2")
        elif section == "drift":
            out = _resolve_drift(sec, default, loc)
        else:
            out = _resolve_direction(sec, default, loc)
        cfg[section] = out

    params = copy.deepcopy(exp.params)
    for key, value in _section(raw, "params", loc).items():
        if key not in params:
            raise loc.error(f"params.{key}", f"unknown parameter for {name!r}; "
                                             f"allowed: {', '.join(sorted(params))}")
        params[key] = _coerce(value, type(params[key]), f"params.{key}", loc)
    cfg["params"] = params
    return cfg


def config_hash(cfg):
    """SHA-256 of the resolved config, ignoring output path and thread count."""
    data = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()
