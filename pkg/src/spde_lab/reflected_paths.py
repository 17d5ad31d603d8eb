"""Brownian motion on ``[0, 1]`` reflected at both ends.

The process is generated by ``d^2/dx^2``, so the free driver has
``Var B(t) = 2 t``. Paths are produced by folding the discrete free path
with :func:`reflect`, which realizes the reflected process exactly at the
sample times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .noise_field import STREAM_PATHS, counter_normals


def reflect(z):
    """Fold the real line onto ``[0, 1]``: ``1 - |1 - (z mod 2)|``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("cannot reflect a non-finite position")
    # points already inside are returned untouched, avoiding rounding in the fold
    out = np.where((z >= 0.0) & (z <= 1.0), z, 1.0 - np.abs(1.0 - np.mod(z, 2.0)))
    return out[()] if out.ndim == 0 else out


def _time_grid(T, dt):
    if not (math.isfinite(dt) and dt > 0):
        raise DomainError(f"path step must be positive, got {dt}")
    if T < 0:
        raise DomainError("path horizon must be non-negative")
    n = int(math.ceil(T / dt - 1e-9))
    times = np.linspace(0.0, T, n + 1)
    return times


@dataclass(frozen=True, eq=False)
class PathSample:
    """Reflected paths sharing one time grid.

    ``positions`` has shape ``(n_paths, len(times))``; ``free`` holds the
    unreflected driver ``x + B(r)``.
    """

    start: float
    times: np.ndarray = field(repr=False)
    positions: np.ndarray = field(repr=False)
    free: np.ndarray = field(repr=False)
    seed: int

    @property
    def n_paths(self):
        return self.positions.shape[0]


def sample_paths(x, T, dt, n_paths, seed, *, path_offset=0):
    """``n_paths`` reflected paths from ``x``; path ``i`` uses counter row ``path_offset + i``.

    Any subset of paths can therefore be regenerated on its own.
    """
    x = float(x)
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"start must lie in [0, 1], got {x}")
    times = _time_grid(T, dt)
    n_steps = times.size - 1
    if n_steps == 0:
        free = np.full((n_paths, 1), x)
        return PathSample(x, times, free.copy(), free, int(seed))
    z = counter_normals(seed, n_paths, n_steps, stream=STREAM_PATHS, row_offset=path_offset)
    steps = z * np.sqrt(2.0 * np.diff(times))
    free = np.empty((n_paths, n_steps + 1))
    free[:, 0] = x
    np.cumsum(steps, axis=1, out=free[:, 1:])
    free[:, 1:] += x
    return PathSample(x, times, reflect(free), free, int(seed))


def sample_path(x, T, dt, seed):
    """A single reflected path (the first path of :func:`sample_paths`)."""
    return sample_paths(x, T, dt, 1, seed)
