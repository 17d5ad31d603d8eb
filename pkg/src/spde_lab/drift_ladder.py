"""Smooth approximations of a bounded measurable drift.

For a drift ``b`` the ladder consists of

* mollifications ``b_n = (n rho(n .)) * b``,
* running minima ``min(b_n, ..., b_k)`` (Lipschitz for finite ``k``),
* the limits ``inf_{j >= n} b_j``, approximated by increasing ``k``.

``rho`` is the normalized bump ``exp(-1/(1-y^2))`` on ``(-1, 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import DomainError, QuadratureError
from .noise_field import parallel_map, sample_noise_batch, seed_blocks
from .spde_solver import DriftSpec, PiecewiseConstant, constant_drift, solve_batch, zero_drift

SUPPORT_RADIUS = 1.0
N_QUAD = 401
TABLE_RANGE = (-8.0, 8.0)


def _bump(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros(y.shape)
    inside = np.abs(y) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - y[inside] ** 2))
    return out


def _bump_prime(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros(y.shape)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    out[inside] = np.exp(-1.0 / (1.0 - yi**2)) * (-2.0 * yi / (1.0 - yi**2) ** 2)
    return out


def _bump_cdf_table(n_nodes=4001, n_gauss=12):
    s = np.linspace(-1.0, 1.0, n_nodes)
    gx, gw = np.polynomial.legendre.leggauss(n_gauss)
    half = 0.5 * np.diff(s)
    mid = 0.5 * (s[1:] + s[:-1])
    pieces = (_bump(mid[:, None] + half[:, None] * gx[None, :]) * gw).sum(axis=1) * half
    cum = np.concatenate([[0.0], np.cumsum(pieces)])
    return s, cum, cum[-1]


_CDF_NODES, _CDF_RAW, BUMP_MASS = _bump_cdf_table()
_CDF_SPLINE = CubicHermiteSpline(_CDF_NODES, _CDF_RAW / BUMP_MASS, _bump(_CDF_NODES) / BUMP_MASS)


def rho(y):
    """Unit-mass even bump supported on ``[-1, 1]``."""
    return _bump(y) / BUMP_MASS


def rho_prime(y):
    return _bump_prime(y) / BUMP_MASS


def rho_cdf(s):
    """``int_{-1}^s rho``; 0 below -1 and 1 above 1."""
    s = np.asarray(s, dtype=float)
    out = np.where(s >= 1.0, 1.0, 0.0)
    inside = np.abs(s) < 1.0
    out[inside] = _CDF_SPLINE(s[inside])
    return out


_Z = np.linspace(-SUPPORT_RADIUS, SUPPORT_RADIUS, N_QUAD)
_W = rho(_Z)
_WP = rho_prime(_Z)
_W_SUM = _W.sum()


def _mollify_steps(steps, n, x):
    x = np.asarray(x, dtype=float)
    vals = np.array(steps(x), dtype=float, ndmin=1).reshape(x.shape)
    jumps = np.diff(np.asarray(steps.values, dtype=float))
    for a, dv in zip(steps.breakpoints, jumps):
        s = n * (x - a)
        near = np.abs(s) < 1.0
        if near.any():
            vals[near] += dv * (rho_cdf(s[near]) - (s[near] > 0))
    return vals[()] if vals.ndim == 0 else vals


def _mollify_steps_prime(steps, n, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    jumps = np.diff(np.asarray(steps.values, dtype=float))
    for a, dv in zip(steps.breakpoints, jumps):
        out += dv * n * rho(n * (x - a))
    return out


def _mollify_quadrature(b, n, x, weights):
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    chunk = max(1, 2**20 // N_QUAD)
    for lo in range(0, flat.size, chunk):
        pts = flat[lo:lo + chunk, None] - _Z[None, :] / n
        vals = np.asarray(b(pts), dtype=float)
        if not np.all(np.isfinite(vals)):
            bad = pts[~np.isfinite(vals)][0]
            raise QuadratureError(f"drift is not finite at y = {bad!r} inside the mollifier window")
        out[lo:lo + chunk] = vals @ weights
    return out.reshape(x.shape) / _W_SUM


@dataclass(frozen=True, eq=False)
class LadderMember:
    """One rung of the ladder.

    ``kind`` is ``"mollified"``, ``"running_min"`` or ``"inf_limit"``;
    ``k`` equals ``n`` for mollifications. Calling the member evaluates it
    directly (quadrature or exact step formula); :meth:`as_drift` returns
    a tabulated :class:`DriftSpec` suited to the solver.
    """

    base: DriftSpec
    n: int
    k: int
    kind: str
    table_x: np.ndarray | None = field(default=None, repr=False)
    table_y: np.ndarray | None = field(default=None, repr=False)
    converged: bool = True

    def __call__(self, x):
        if self.kind == "mollified":
            return self._mollified(x)
        x = np.asarray(x, dtype=float)
        if self.table_x is not None and np.all((x >= self.table_x[0]) & (x <= self.table_x[-1])):
            return np.interp(x, self.table_x, self.table_y)
        out = np.full(x.shape, np.inf)
        for j in range(self.n, self.k + 1):
            out = np.minimum(out, mollify(self.base, j)(x))
        return out

    def _mollified(self, x):
        if self.base.steps is not None:
            return _mollify_steps(self.base.steps, self.n, x)
        return _mollify_quadrature(self.base.b, self.n, x, _W)

    def derivative(self, x):
        """Exact derivative of a mollification (differentiation under the integral)."""
        if self.kind != "mollified":
            raise DomainError(f"{self.kind} members are only Lipschitz")
        if self.base.steps is not None:
            return _mollify_steps_prime(self.base.steps, self.n, x)
        return self.n * _mollify_quadrature(self.base.b, self.n, x, _WP)

    @property
    def name(self):
        if self.kind == "mollified":
            return f"{self.base.name}_n{self.n}"
        return f"{self.base.name}_min{self.n}..{self.k}"

    def quadrature_error(self, x):
        """Difference between the 401-point rule and the rule on every other node."""
        if self.kind != "mollified" or self.base.steps is not None:
            return np.zeros(np.shape(x))
        x = np.asarray(x, dtype=float)
        pts = x[..., None] - _Z[::2] / self.n
        coarse = np.asarray(self.base.b(pts), dtype=float) @ _W[::2] / _W[::2].sum()
        return np.abs(self._mollified(x) - coarse)

    @cached_property
    def lipschitz(self):
        """Largest difference quotient on the lookup grid."""
        x, y = self._table()
        return float(np.max(np.abs(np.diff(y)) / np.diff(x)))

    def _table(self):
        if self.table_x is not None:
            return self.table_x, self.table_y
        x = _table_grid(self.k)
        return x, self(x)

    def as_drift(self):
        """Tabulated drift on ``[-8, 8]``; outside the table it falls back to direct evaluation.

        Mollifications use cubic Hermite interpolation with exact slopes
        and are declared ``c1`` with the spline derivative. Running minima
        use linear interpolation and are declared ``lipschitz``.
        """
        sup = self.base.sup_norm
        lo, hi = TABLE_RANGE
        if self.kind == "mollified":
            x = _table_grid(self.n)
            spline = CubicHermiteSpline(x, self(x), self.derivative(x))
            dspline = spline.derivative()

            def b(u, spline=spline):
                u = np.asarray(u, dtype=float)
                inside = (u >= lo) & (u <= hi)
                if inside.all():
                    return np.clip(spline(u), -sup, sup)
                out = np.empty(u.shape)
                out[inside] = np.clip(spline(u[inside]), -sup, sup)
                out[~inside] = self(u[~inside])
                return out

            def bprime(u, dspline=dspline):
                u = np.asarray(u, dtype=float)
                inside = (u >= lo) & (u <= hi)
                if inside.all():
                    return dspline(u)
                out = np.empty(u.shape)
                out[inside] = dspline(u[inside])
                out[~inside] = self.derivative(u[~inside])
                return out

            return DriftSpec(b, sup, "c1", self.lipschitz, bprime, name=self.name)

        x, y = self._table()

        def b(u):
            u = np.asarray(u, dtype=float)
            inside = (u >= x[0]) & (u <= x[-1])
            if inside.all():
                return np.interp(u, x, y)
            out = np.empty(u.shape)
            out[inside] = np.interp(u[inside], x, y)
            out[~inside] = self(u[~inside])
            return out

        return DriftSpec(b, sup, "lipschitz", self.lipschitz, name=self.name)


def _table_grid(k, lo=TABLE_RANGE[0], hi=TABLE_RANGE[1]):
    h = min(1e-3, 1.0 / (40.0 * k))
    return np.linspace(lo, hi, int(round((hi - lo) / h)) + 1)


def mollify(base, n):
    """Mollification ``b_n(x) = n int rho(n (x - y)) b(y) dy``.

    Step drifts (``base.steps`` set) are integrated exactly through the
    mollifier distribution function. Other drifts use the 401-point
    trapezoid rule over the kernel support, normalized to unit mass.
    """
    if int(n) != n or n < 1:
        raise DomainError(f"mollification index must be a positive integer, got {n}")
    return LadderMember(base, int(n), int(n), "mollified")


def running_min(base, n, k, *, spacing_k=None):
    """Pointwise minimum of ``mollify(base, j)`` for ``j = n .. k``.

    The minimum is formed on the lookup grid of spacing ``min(1e-3, 1/(40 k))``
    over ``[-8, 8]``, so evaluation inside that range is linear interpolation.
    ``spacing_k`` overrides ``k`` in the spacing rule; members sharing it
    share a table grid and stay pointwise ordered in ``k``.
    """
    if int(n) != n or int(k) != k or n < 1:
        raise DomainError("ladder indices must be positive integers")
    if n > k:
        raise DomainError(f"running_min needs n <= k, got n={n}, k={k}")
    if n == k and spacing_k is None:
        return mollify(base, n)
    x = _table_grid(k if spacing_k is None else spacing_k)
    y = np.full(x.shape, np.inf)
    for j in range(int(n), int(k) + 1):
        np.minimum(y, mollify(base, j)(x), out=y)
    return LadderMember(base, int(n), int(k), "running_min", x, y)


def inf_limit(base, n, *, tol=1e-6, k_max=4096, lo=-4.0, hi=4.0, spacing=1e-3):
    """Approximate ``inf_{j >= n} b_j`` by a running minimum.

    ``k`` starts at ``2n`` and doubles until the sup-difference between the
    minima up to ``k`` and up to ``2k`` on a uniform grid falls below ``tol``.
    The returned member has ``converged = False`` if ``k_max`` was reached.
    """
    if n < 1:
        raise DomainError("n must be positive")
    x = np.linspace(lo, hi, int(round((hi - lo) / spacing)) + 1)
    y = np.full(x.shape, np.inf)
    for j in range(n, 2 * n + 1):
        np.minimum(y, mollify(base, j)(x), out=y)
    k = 2 * n
    converged = False
    while 2 * k <= k_max:
        prev = y.copy()
        for j in range(k + 1, 2 * k + 1):
            np.minimum(y, mollify(base, j)(x), out=y)
        k *= 2
        if np.max(prev - y) < tol:
            converged = True
            break
    return LadderMember(base, int(n), int(k), "inf_limit", x, y, converged)


def sign_drift():
    steps = PiecewiseConstant((0.0,), (-1.0, 1.0))
    return DriftSpec(lambda x: np.sign(np.asarray(x, dtype=float)), 1.0, name="sign", steps=steps)


def step_drift():
    """Indicator of ``x > 0``."""
    steps = PiecewiseConstant((0.0,), (0.0, 1.0))
    return DriftSpec(steps, 1.0, name="step", steps=steps)


def comb_drift(level=3, extent=16.0):
    """``+1/-1`` alternating on dyadic intervals ``[j 2^-level, (j+1) 2^-level)``
    inside ``[-extent, extent]``; constant beyond."""
    width = 2.0**-level
    m = int(round(extent / width))
    breakpoints = tuple(np.arange(-m, m + 1) * width)
    values = tuple(1.0 if j % 2 == 0 else -1.0 for j in range(len(breakpoints) + 1))
    steps = PiecewiseConstant(breakpoints, values)
    return DriftSpec(steps, 1.0, name=f"comb{level}", steps=steps)


def smooth_sine(amplitude=1.0, omega=1.0):
    return DriftSpec(lambda x: amplitude * np.sin(omega * np.asarray(x, dtype=float)), abs(amplitude),
                     "c1", abs(amplitude * omega),
                     lambda x: amplitude * omega * np.cos(omega * np.asarray(x, dtype=float)),
                     name="smooth-sine")


def arctan_drift(amplitude=1.0, slope=2.0):
    """``amplitude * (2/pi) * arctan(slope x)``: smooth, sup-norm ``|amplitude|``."""
    c = 2.0 * amplitude / math.pi
    return DriftSpec(lambda x: c * np.arctan(slope * np.asarray(x, dtype=float)), abs(amplitude), "c1",
                     abs(c * slope), lambda x: c * slope / (1.0 + (slope * np.asarray(x, dtype=float)) ** 2),
                     name="arctan")


def named_drift(name, **params):
    """Drift by config name: sign, step, comb, smooth-sine, arctan, zero or constant."""
    makers = {"sign": sign_drift, "step": step_drift, "comb": comb_drift,
              "smooth-sine": smooth_sine, "arctan": arctan_drift, "zero": zero_drift,
              "constant": constant_drift}
    if name not in makers:
        raise KeyError(f"unknown drift {name!r}; choose from {sorted(makers)}")
    return makers[name](**params)


@dataclass
class LadderStudy:
    """Mean-square distances of ladder solutions at a probe point.

    ``mse[i]`` compares schedule entry ``i`` with the direct solve using the
    base drift; ``cauchy[i]`` compares entries ``i`` and ``i + 1``.
    """

    schedule: list
    n_seeds: int
    mse: np.ndarray
    se: np.ndarray
    cauchy: np.ndarray
    cauchy_se: np.ndarray

    def nonincreasing(self, n_se=2.0):
        """Each mse is at most the previous one plus ``n_se`` combined standard errors."""
        d = self.mse[1:] - self.mse[:-1]
        allowance = n_se * np.hypot(self.se[1:], self.se[:-1])
        return bool(np.all(d <= allowance))

    def rows(self):
        return [(n, k, self.n_seeds, float(m), float(s))
                for (n, k), m, s in zip(self.schedule, self.mse, self.se)]


def convergence_study(base, grid, u0, probe, seeds, schedule, *, threads=1, chunk=None):
    """Common-noise ladder study at ``probe = (t, x)``.

    Parameters
    ----------
    base : DriftSpec
    grid : SpaceTimeGrid
    u0 : initial condition accepted by :func:`solve_batch`
    probe : (float, float)
        A grid node.
    seeds : sequence of int
        At least 100 seeds; each seed drives every schedule entry.
    schedule : sequence of (n, k)

    Returns
    -------
    LadderStudy
    """
    schedule = [(int(n), int(k)) for n, k in schedule]
    if not schedule:
        raise DomainError("empty ladder schedule")
    seeds = list(seeds)
    if len(seeds) < 100:
        raise DomainError(f"convergence study needs >= 100 seeds, got {len(seeds)}")
    t, x = probe
    ti = grid.time_index(t)
    grid.space_index(x)
    drifts = [base] + [running_min(base, n, k).as_drift() for n, k in schedule]

    def run(block):
        inc = sample_noise_batch(grid, block)
        return np.stack([solve_batch(grid, d, u0, inc, track=x)[:, ti] for d in drifts], axis=1)

    vals = np.vstack(parallel_map(run, seed_blocks(grid, seeds, chunk), threads))
    sq = (vals[:, 1:] - vals[:, :1]) ** 2
    cq = (vals[:, 2:] - vals[:, 1:-1]) ** 2
    root = math.sqrt(len(seeds))
    return LadderStudy(schedule, len(seeds), sq.mean(axis=0), sq.std(axis=0, ddof=1) / root,
                       cq.mean(axis=0), cq.std(axis=0, ddof=1) / root if cq.shape[1] else cq.mean(axis=0))


@dataclass
class ComparisonResult:
    """Pointwise ordering of ladder solutions along increasing ``k``.

    ``max_violation`` is the largest ``u_{n,k'} - u_{n,k}`` over all nodes,
    seeds and ``k < k'``; the comparison principle makes it ``<= 0``.
    """

    n: int
    ks: list
    max_violation: float
    step_ratio: float

    def holds(self, tol=1e-12):
        return self.max_violation <= tol


def comparison_check(base, grid, u0, n, ks, seeds, *, threads=1, chunk=None):
    """Solve with ``running_min(base, n, k)`` for each ``k`` on common noise.

    All members share the table grid of the largest ``k`` so the drifts are
    ordered exactly, not only up to interpolation error. The discrete
    scheme is monotone while ``dt * Lipschitz <= 1``; ``step_ratio`` reports
    that product for the roughest member.
    """
    ks = sorted(int(k) for k in ks)
    if len(ks) < 2:
        raise DomainError("need at least two k values")
    members = [running_min(base, n, k, spacing_k=ks[-1]) for k in ks]
    drifts = [m.as_drift() for m in members]
    step_ratio = grid.dt * max(m.lipschitz for m in members)
    seeds = list(seeds)

    def run(block):
        inc = sample_noise_batch(grid, block)
        prev, worst = None, -math.inf
        for d in drifts:
            u = solve_batch(grid, d, u0, inc)
            if prev is not None:
                worst = max(worst, float(np.max(u - prev)))
            prev = u
        return worst

    worst = max(parallel_map(run, seed_blocks(grid, seeds, chunk), threads))
    return ComparisonResult(int(n), ks, worst, float(step_ratio))
