r"""Semi-implicit finite-difference solver for

.. math::

    \partial_t u = \partial_x^2 u + b(u) + \dot W, \qquad
    \partial_x u(t, 0) = \partial_x u(t, 1) = 0 .

One step reads ``(I - dt*Lap) u[i+1] = u[i] + dt*b(u[i]) + P dW[i]``. ``Lap`` is
the node-centred Laplacian with mirrored ghost nodes. ``P`` spreads each noise
cell half-and-half onto its two end nodes and divides by the nodal control
volume (``dx`` inside, ``dx/2`` on the boundary). For interior nodes this
is ``(dW[j-1] + dW[j]) / (2*dx)`` and on the boundary ``dW / dx``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lapack

from .errors import DomainError, GridMismatchError
from .noise_field import NoiseRealization, SpaceTimeGrid, _kernel_on_grid

SMOOTHNESS = ("measurable", "lipschitz", "c1")


@dataclass(frozen=True)
class PiecewiseConstant:
    """Step function ``values[k]`` on ``(breakpoints[k-1], breakpoints[k])``.

    ``values`` has one more entry than ``breakpoints``; the outer entries
    extend to minus and plus infinity.
    """

    breakpoints: tuple
    values: tuple

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if len(self.values) != bp.size + 1:
            raise ValueError("need len(values) == len(breakpoints) + 1")
        if bp.size and np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    def __call__(self, x):
        idx = np.searchsorted(np.asarray(self.breakpoints, dtype=float), x, side="left")
        return np.asarray(self.values, dtype=float)[idx]


@dataclass(frozen=True)
class DriftSpec:
    """A bounded drift ``b`` with its declared sup-norm and smoothness class.

    ``steps`` optionally carries an exact step-function description of
    ``b``; mollification uses it to integrate across the jumps exactly.
    """

    b: Callable
    sup_norm: float
    smoothness: str = "measurable"
    lipschitz: float | None = None
    bprime: Callable | None = None
    name: str = "b"
    steps: PiecewiseConstant | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.smoothness not in SMOOTHNESS:
            raise ValueError(f"smoothness must be one of {SMOOTHNESS}, got {self.smoothness!r}")
        if not (math.isfinite(self.sup_norm) and self.sup_norm >= 0):
            raise ValueError("sup_norm must be finite and non-negative")
        if self.smoothness == "c1" and self.bprime is None:
            raise ValueError("a c1 drift needs its derivative bprime")
        if self.smoothness == "lipschitz" and self.lipschitz is None:
            raise ValueError("a lipschitz drift needs its constant")

    def __call__(self, x):
        return self.b(x)

    def validate(self, lo=-8.0, hi=8.0, n=4001, fd_step=1e-6, fd_tol=1e-4):
        """Spot-check the declared invariants on a uniform grid.

        Raises ``ValueError`` naming the first violation.
        """
        x = np.linspace(lo, hi, n)
        vals = np.asarray(self.b(x), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{self.name}: non-finite value at x = {x[~np.isfinite(vals)][0]}")
        over = np.abs(vals) > self.sup_norm * (1 + 1e-12) + 1e-12
        if over.any():
            k = int(np.argmax(over))
            raise ValueError(f"{self.name}: |b({x[k]})| = {abs(vals[k])} exceeds sup_norm {self.sup_norm}")
        if self.smoothness == "c1":
            fd = (np.asarray(self.b(x + fd_step)) - np.asarray(self.b(x - fd_step))) / (2 * fd_step)
            exact = np.asarray(self.bprime(x), dtype=float)
            scale = 1.0 + np.max(np.abs(exact))
            bad = np.abs(fd - exact) > fd_tol * scale
            if bad.any():
                k = int(np.argmax(bad))
                raise ValueError(f"{self.name}: derivative mismatch at x = {x[k]}: "
                                 f"finite difference {fd[k]}, declared {exact[k]}")
        return self

    def estimate_lipschitz(self, lo=-8.0, hi=8.0, n=200001):
        """Largest difference quotient on a uniform grid (a lower bound)."""
        x = np.linspace(lo, hi, n)
        vals = np.asarray(self.b(x), dtype=float)
        return float(np.max(np.abs(np.diff(vals))) / (x[1] - x[0]))


def zero_drift():
    return DriftSpec(lambda x: np.zeros_like(np.asarray(x, dtype=float)), 0.0, "c1", 0.0,
                     lambda x: np.zeros_like(np.asarray(x, dtype=float)), name="zero")


def constant_drift(c):
    return DriftSpec(lambda x: np.full_like(np.asarray(x, dtype=float), c), abs(c), "c1", 0.0,
                     lambda x: np.zeros_like(np.asarray(x, dtype=float)), name=f"const({c})")


class HeatStep:
    """LU-factored ``I - dt*Lap`` for the Neumann node Laplacian."""

    def __init__(self, grid: SpaceTimeGrid):
        n = grid.nx + 1
        r = grid.dt / grid.dx**2
        d = np.full(n, 1.0 + 2.0 * r)
        du = np.full(n - 1, -r)
        dl = np.full(n - 1, -r)
        du[0] = -2.0 * r
        dl[-1] = -2.0 * r
        dl, d, du, du2, ipiv, info = lapack.dgttrf(dl, d, du)
        if info != 0:
            raise ArithmeticError(f"singular implicit heat operator (dgttrf info={info})")
        self._lu = (dl, d, du, du2, ipiv)

    def solve(self, rhs):
        """Solve for a ``(nx+1,)`` vector or ``(nx+1, batch)`` block of right-hand sides."""
        b = rhs if rhs.ndim == 2 else rhs[:, None]
        x, info = lapack.dgttrs(*self._lu, b)
        if info != 0:
            raise ArithmeticError(f"dgttrs failed with info={info}")
        return x if rhs.ndim == 2 else x[:, 0]


def cells_to_nodes(cells, dx):
    """Spread cell masses (last axis ``nx``) onto nodes, per unit length."""
    shape = cells.shape[:-1] + (cells.shape[-1] + 1,)
    out = np.zeros(shape)
    out[..., :-1] += 0.5 * cells
    out[..., 1:] += 0.5 * cells
    out[..., 1:-1] /= dx
    out[..., [0, -1]] /= 0.5 * dx
    return out


def _initial_values(grid, u0):
    if u0 is None:
        return np.zeros(grid.nx + 1), "zero"
    if callable(u0):
        vals = np.asarray(u0(grid.nodes), dtype=float) * np.ones(grid.nx + 1)
        return vals, getattr(u0, "__name__", "callable")
    arr = np.asarray(u0, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.nx + 1, float(arr)), f"constant({float(arr)})"
    if arr.shape != (grid.nx + 1,):
        raise GridMismatchError(f"u0 has shape {arr.shape}, grid has {grid.nx + 1} nodes")
    return arr.copy(), "array"


def _check_drift_values(vals, u):
    bad = ~np.isfinite(vals)
    if bad.any():
        k = np.flatnonzero(bad.ravel())[0]
        raise ArithmeticError(f"drift returned {vals.ravel()[k]!r} at u = {u.ravel()[k]!r}")


def _track_weights(grid, track):
    pos = np.asarray(track, dtype=float)
    if pos.ndim == 0:
        pos = np.full(grid.nt + 1, float(pos))
    if pos.shape != (grid.nt + 1,):
        raise GridMismatchError("track must be a position or one position per time node")
    if np.any((pos < 0) | (pos > 1)):
        raise DomainError("tracked positions must lie in [0, 1]")
    j = np.minimum((pos / grid.dx).astype(int), grid.nx - 1)
    w = pos / grid.dx - j
    return j, w


def solve_batch(grid, drift, u0, increments, *, track=None):
    """Integrate a batch of noise realizations.

    Parameters
    ----------
    grid : SpaceTimeGrid
    drift : DriftSpec or callable
    u0 : callable, array of node values, scalar or None (zero)
    increments : ndarray, shape ``(batch, nt, nx)``
    track : float or ndarray, optional
        Record only ``u(t_i, track[i])`` by linear interpolation in space.

    Returns
    -------
    ndarray
        ``(batch, nt+1, nx+1)`` field values, or ``(batch, nt+1)`` when tracking.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[1:] != (grid.nt, grid.nx):
        raise GridMismatchError(f"increments shape {increments.shape} does not fit {grid}")
    batch = increments.shape[0]
    b = drift.b if isinstance(drift, DriftSpec) else drift
    step = HeatStep(grid)
    u = np.repeat(_initial_values(grid, u0)[0][:, None], batch, axis=1)
    if track is None:
        out = np.empty((batch, grid.nt + 1, grid.nx + 1))
        out[:, 0] = u.T
    else:
        jj, ww = _track_weights(grid, track)
        out = np.empty((batch, grid.nt + 1))
        out[:, 0] = u[jj[0]] * (1 - ww[0]) + u[jj[0] + 1] * ww[0]
    dt = grid.dt
    for i in range(grid.nt):
        drift_vals = np.asarray(b(u), dtype=float)
        _check_drift_values(drift_vals, u)
        u = step.solve(u + dt * drift_vals + cells_to_nodes(increments[:, i], grid.dx).T)
        if track is None:
            out[:, i + 1] = u.T
        else:
            j, w = jj[i + 1], ww[i + 1]
            out[:, i + 1] = u[j] * (1 - w) + u[j + 1] * w
    return out


@dataclass(frozen=True, eq=False)
class SolutionField:
    """Grid values ``u(t_i, x_j)`` with the inputs that produced them."""

    grid: SpaceTimeGrid
    values: np.ndarray = field(repr=False)
    drift: DriftSpec | None
    noise: NoiseRealization | None = field(default=None, repr=False)
    u0: str = "zero"

    @property
    def seed(self):
        return None if self.noise is None else self.noise.seed

    def at(self, t, x):
        """Bilinear interpolation of the field at arbitrary ``(t, x)``."""
        g = self.grid
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if np.any((t < 0) | (t > g.T * (1 + 1e-12))) or np.any((x < 0) | (x > 1)):
            raise DomainError("evaluation point outside [0, T] x [0, 1]")
        ft = np.clip(t / g.dt, 0, g.nt)
        fx = np.clip(x / g.dx, 0, g.nx)
        i = np.minimum(ft.astype(int), g.nt - 1)
        j = np.minimum(fx.astype(int), g.nx - 1)
        a = ft - i
        c = fx - j
        v = self.values
        return ((1 - a) * ((1 - c) * v[i, j] + c * v[i, j + 1])
                + a * ((1 - c) * v[i + 1, j] + c * v[i + 1, j + 1]))

    def value(self, t, x):
        """Value at a grid node; raises if ``(t, x)`` is off the grid."""
        return float(self.values[self.grid.time_index(t), self.grid.space_index(x)])

    def to_csv(self, path):
        """Long-format ``t,x,u`` rows."""
        g = self.grid
        tt, xx = np.meshgrid(g.times, g.nodes, indexing="ij")
        with open(path, "w") as fh:
            fh.write(f"# seed: {self.seed}\n# drift: {getattr(self.drift, 'name', None)}\n"
                     f"# u0: {self.u0}\n# grid: T={g.T} nt={g.nt} nx={g.nx}\n")
            fh.write("t,x,u\n")
            for t, x, u in zip(tt.ravel(), xx.ravel(), self.values.ravel()):
                fh.write(f"{t!r},{x!r},{u!r}\n")

    def save(self, path):
        """Binary replay file: JSON header line, then row-major float64 values.

        The header records the noise seed, so the run can be replayed with
        :func:`sample_noise` and :func:`solve`.
        """
        g = self.grid
        header = {"T": g.T, "nt": g.nt, "nx": g.nx, "seed": self.seed,
                  "drift": getattr(self.drift, "name", None), "u0": self.u0}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(b"SPDEFIELD1\n")
            fh.write(struct.pack("<q", len(blob)))
            fh.write(blob)
            fh.write(self.values.astype("<f8").tobytes(order="C"))


def load_field(path):
    """Read a field written by :meth:`SolutionField.save`; returns ``(header, values)``."""
    with open(path, "rb") as fh:
        if fh.readline() != b"SPDEFIELD1\n":
            raise ValueError(f"{path}: not a field dump")
        (size,) = struct.unpack("<q", fh.read(8))
        header = json.loads(fh.read(size))
        values = np.frombuffer(fh.read(), dtype="<f8")
    return header, values.reshape(header["nt"] + 1, header["nx"] + 1)


def solve(grid, drift, u0, noise):
    """Mild-solution approximation for one noise realization.

    Parameters
    ----------
    grid : SpaceTimeGrid
    drift : DriftSpec
    u0 : callable, node array, scalar or None
    noise : NoiseRealization
        Must be built on ``grid``.

    Returns
    -------
    SolutionField
    """
    if noise.grid != grid:
        raise GridMismatchError(f"noise grid {noise.grid} differs from solver grid {grid}")
    _, u0_name = _initial_values(grid, u0)
    values = solve_batch(grid, drift, u0, noise.increments[None])[0]
    return SolutionField(grid, values, drift, noise, u0_name)


def linearized_batch(grid, u_values, bprime, source_cells):
    """Solve ``v_t = v_xx + b'(u) v + h`` for a batch of base fields.

    ``source_cells`` holds ``h`` at cell midpoints, shape ``(nt, nx)``. It is
    spread onto nodes exactly like a noise shift, so a finite-difference
    Cameron-Martin derivative of :func:`solve_batch` converges to this.
    """
    u_values = np.asarray(u_values, dtype=float)
    squeeze = u_values.ndim == 2
    if squeeze:
        u_values = u_values[None]
    batch = u_values.shape[0]
    step = HeatStep(grid)
    src = cells_to_nodes(np.asarray(source_cells, dtype=float) * grid.dx, grid.dx) * grid.dt
    v = np.zeros((grid.nx + 1, batch))
    out = np.empty((batch, grid.nt + 1, grid.nx + 1))
    out[:, 0] = 0.0
    for i in range(grid.nt):
        coef = np.asarray(bprime(u_values[:, i].T), dtype=float)
        _check_drift_values(coef, u_values[:, i].T)
        v = step.solve(v + grid.dt * coef * v + src[i][:, None])
        out[:, i + 1] = v.T
    return out[0] if squeeze else out


def solve_linearized(grid, base, h, bprime=None):
    """Directional derivative field ``v`` along ``h`` for a smooth drift.

    Parameters
    ----------
    grid : SpaceTimeGrid
    base : SolutionField
        Solution whose drift supplies ``b'`` (unless ``bprime`` is given).
    h : Direction, callable or ``(nt, nx)`` array
    bprime : callable, optional
        Overrides ``base.drift.bprime``.

    Returns
    -------
    ndarray, shape ``(nt+1, nx+1)``, with ``v(0, .) = 0``.
    """
    if base.grid != grid:
        raise GridMismatchError("base field lives on a different grid")
    if bprime is None:
        if base.drift is None or base.drift.bprime is None:
            raise DomainError("linearization needs a c1 drift (no derivative available)")
        bprime = base.drift.bprime
    return linearized_batch(grid, base.values, bprime, _kernel_on_grid(h, grid))
