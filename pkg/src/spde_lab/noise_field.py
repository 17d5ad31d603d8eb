"""Discrete space-time white noise on ``[0, T] x [0, 1]``.

Noise lives on cells: entry ``(i, j)`` of an increment matrix is the white
noise mass of ``[t_i, t_{i+1}) x [x_j, x_{j+1})`` and is ``Normal(0, dt*dx)``.

Random numbers come from a counter-based generator. Row ``i`` of the stream
for ``seed`` is a pure function of ``(seed, stream, i)``, so rows can be
produced in any order, by any number of workers, with identical results.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from numpy.random import Philox
from scipy import integrate
from scipy.special import ndtri

from .errors import DomainError, GridMismatchError

# stream tags keep the generators of different subsystems disjoint
STREAM_NOISE = 0
STREAM_PATHS = 1
STREAM_SIMPLEX = 2
STREAM_BOOTSTRAP = 3

_SEED_LIMIT = 2**64


def counter_normals(seed, n_rows, n_cols, *, stream=STREAM_NOISE, row_offset=0):
    """Standard normals for rows ``row_offset .. row_offset + n_rows - 1``.

    Each row occupies a fixed block of the Philox counter space, so any
    slice of rows equals the corresponding slice of a full draw.
    Uniforms are mapped through the inverse normal distribution function.
    """
    seed = int(seed)
    if not 0 <= seed < _SEED_LIMIT:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    blocks = -(-n_cols // 4)
    gen = Philox(key=(int(stream) << 64) | seed, counter=int(row_offset) * blocks)
    raw = gen.random_raw(n_rows * blocks * 4).reshape(n_rows, blocks * 4)[:, :n_cols]
    uniform = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(uniform)


def parallel_map(func, items, threads=1):
    """Order-preserving map; runs on a thread pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform grid with ``nt`` time steps on ``[0, T]`` and ``nx`` cells on ``[0, 1]``."""

    T: float = 1.0
    nt: int = 512
    nx: int = 64

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise DomainError(f"horizon T must be positive and finite, got {self.T}")
        if int(self.nt) != self.nt or int(self.nx) != self.nx:
            raise DomainError("nt and nx must be integers")
        if self.nt < 2 or self.nx < 2:
            raise DomainError(f"need nt, nx >= 2, got nt={self.nt}, nx={self.nx}")

    @property
    def dt(self):
        return self.T / self.nt

    @property
    def dx(self):
        return 1.0 / self.nx

    @property
    def times(self):
        """The ``nt + 1`` time nodes; the last one is exactly ``T``."""
        t = np.arange(self.nt + 1) * self.dt
        t[-1] = self.T
        return t

    @property
    def nodes(self):
        """The ``nx + 1`` spatial nodes; the last one is exactly 1."""
        x = np.arange(self.nx + 1) * self.dx
        x[-1] = 1.0
        return x

    @property
    def cell_times(self):
        return (np.arange(self.nt) + 0.5) * self.dt

    @property
    def cell_centers(self):
        return (np.arange(self.nx) + 0.5) * self.dx

    def time_index(self, t):
        """Index of the time node equal to ``t``; raises if ``t`` is off-grid."""
        i = int(round(t / self.dt))
        if not 0 <= i <= self.nt or abs(i * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise DomainError(f"t = {t} is not a time node of {self}")
        return i

    def space_index(self, x):
        j = int(round(x / self.dx))
        if not 0 <= j <= self.nx or abs(j * self.dx - x) > 1e-9:
            raise DomainError(f"x = {x} is not a spatial node of {self}")
        return j


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    """Cell increments of white noise; immutable once built."""

    grid: SpaceTimeGrid
    seed: int | None
    increments: np.ndarray = field(repr=False)

    def __post_init__(self):
        inc = np.array(self.increments, dtype=np.float64, copy=True)
        if inc.shape != (self.grid.nt, self.grid.nx):
            raise GridMismatchError(
                f"increments have shape {inc.shape}, grid needs {(self.grid.nt, self.grid.nx)}")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    def dump(self, path):
        """Write the binary replay format (see :func:`load_noise`)."""
        with open(path, "wb") as fh:
            fh.write(_NOISE_MAGIC)
            seed = -1 if self.seed is None else int(self.seed)
            fh.write(struct.pack("<dqqq", self.grid.T, self.grid.nt, self.grid.nx, seed))
            fh.write(self.increments.astype("<f8").tobytes(order="C"))


_NOISE_MAGIC = b"SPDENOISE1\n"


def load_noise(path):
    """Read a noise file written by :meth:`NoiseRealization.dump`.

    Layout: magic line, little-endian ``(T: f64, nt: i64, nx: i64,
    seed: i64, -1 for none)``, then ``nt * nx`` row-major float64 values.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_NOISE_MAGIC))
        if magic != _NOISE_MAGIC:
            raise ValueError(f"{path}: not a noise dump")
        T, nt, nx, seed = struct.unpack("<dqqq", fh.read(32))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    grid = SpaceTimeGrid(T, nt, nx)
    if payload.size != nt * nx:
        raise ValueError(f"{path}: truncated payload ({payload.size} of {nt * nx} values)")
    return NoiseRealization(grid, None if seed < 0 else seed, payload.reshape(nt, nx))


def sample_noise(grid, seed, *, threads=1):
    """White noise increments for ``(grid, seed)``; bitwise reproducible.

    ``threads > 1`` generates row blocks concurrently with the same result.
    """
    scale = math.sqrt(grid.dt * grid.dx)
    if threads <= 1:
        z = counter_normals(seed, grid.nt, grid.nx)
    else:
        bounds = np.linspace(0, grid.nt, threads + 1).astype(int)
        parts = parallel_map(
            lambda ab: counter_normals(seed, ab[1] - ab[0], grid.nx, row_offset=ab[0]),
            list(zip(bounds[:-1], bounds[1:])), threads)
        z = np.vstack(parts)
    return NoiseRealization(grid, int(seed), z * scale)


def sample_noise_batch(grid, seeds):
    """Stack of increment matrices, shape ``(len(seeds), nt, nx)``."""
    scale = math.sqrt(grid.dt * grid.dx)
    out = np.empty((len(seeds), grid.nt, grid.nx))
    for k, s in enumerate(seeds):
        out[k] = counter_normals(s, grid.nt, grid.nx)
        out[k] *= scale
    return out


def seed_blocks(grid, seeds, chunk=None, max_bytes=64e6):
    """Split ``seeds`` into blocks whose increment stacks stay below ``max_bytes``."""
    seeds = list(seeds)
    if chunk is None:
        chunk = max(1, int(max_bytes // (8 * grid.nt * grid.nx)))
    return [seeds[i:i + chunk] for i in range(0, len(seeds), chunk)]


class Direction:
    """A Cameron-Martin direction ``h(t, x)`` in ``L^2([0, T] x [0, 1])``.

    Parameters
    ----------
    func : callable
        Vectorised ``h(t, x)``.
    T : float
        Horizon over which the norm is taken.
    name : str, optional
        Label used in reports.
    """

    def __init__(self, func: Callable, T: float = 1.0, name: str | None = None):
        self.func = func
        self.T = float(T)
        self.name = name or getattr(func, "__name__", "h")

    def __call__(self, t, x):
        return np.asarray(self.func(t, x), dtype=float) * np.ones(np.broadcast(t, x).shape)

    @cached_property
    def l2_norm(self):
        val, _ = integrate.dblquad(lambda x, t: float(self(t, x)) ** 2, 0.0, self.T, 0.0, 1.0,
                                   epsabs=1e-12, epsrel=1e-10)
        return math.sqrt(val)

    def on_grid(self, grid):
        """Values at cell midpoints, shape ``(nt, nx)``."""
        if abs(grid.T - self.T) > 1e-12:
            raise GridMismatchError(f"direction defined on [0, {self.T}], grid on [0, {grid.T}]")
        return self(grid.cell_times[:, None], grid.cell_centers[None, :])

    def grid_l2_norm(self, grid):
        vals = self.on_grid(grid)
        return math.sqrt(float(np.sum(vals**2)) * grid.dt * grid.dx)

    def scaled(self, a):
        return Direction(lambda t, x: a * self.func(t, x), self.T, f"{a}*{self.name}")

    def __add__(self, other):
        return Direction(lambda t, x: self.func(t, x) + other.func(t, x), self.T,
                         f"{self.name}+{other.name}")

    def __repr__(self):
        return f"Direction({self.name!r}, T={self.T})"


def _kernel_on_grid(kernel, grid):
    if isinstance(kernel, Direction):
        return kernel.on_grid(grid)
    if callable(kernel):
        return np.asarray(kernel(grid.cell_times[:, None], grid.cell_centers[None, :]),
                          dtype=float) * np.ones((grid.nt, grid.nx))
    arr = np.asarray(kernel, dtype=float)
    if arr.shape != (grid.nt, grid.nx):
        raise GridMismatchError(f"kernel shape {arr.shape} does not match grid {(grid.nt, grid.nx)}")
    return arr


def shift_noise(noise, h, eps):
    """Cameron-Martin shift ``W -> W + eps * h``.

    Returns a new realization with ``increments + eps * h * dt * dx``;
    ``h`` is sampled at cell midpoints.
    """
    grid = noise.grid
    vals = _kernel_on_grid(h, grid)
    if eps == 0:
        return noise
    return NoiseRealization(grid, noise.seed, noise.increments + eps * vals * (grid.dt * grid.dx))


def wiener_integral(noise, kernel):
    """Discrete Wiener integral ``sum_ij kernel(t_i, x_j) * dW_ij``.

    ``kernel`` may be a :class:`Direction`, a callable ``k(t, x)`` or an
    ``(nt, nx)`` array of cell values.
    """
    vals = _kernel_on_grid(kernel, noise.grid)
    return float(np.sum(vals * noise.increments))
