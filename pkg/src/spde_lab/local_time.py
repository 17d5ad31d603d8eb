"""Local times of ``X_s = u(s, x + w(s))`` for the driftless field.

A sampled process is treated as the piecewise-linear interpolant of its
samples. Its occupation measure is then known exactly, bin by bin, which
is what the histogram estimator returns. The Fourier estimator inverts the
characteristic function of the occupation measure on ``[-U, U]``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.ndimage import gaussian_filter1d
from scipy.special import gammaln

from .errors import DomainError
from .heat_kernel import covariance_matrix, g_squared_time_integral
from .noise_field import STREAM_BOOTSTRAP, parallel_map, sample_noise_batch, seed_blocks
from .spde_solver import solve_batch, zero_drift

PAD_BINS = 8
SMOOTH_BINS = 2.0


@dataclass(frozen=True, eq=False)
class CurveProcess:
    """Samples ``X(s_k)`` of a real process at increasing times ``s_k`` (``s_0 = 0``)."""

    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    x: float | None = None
    seed: int | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise DomainError("need matching 1-d times and values with at least two samples")
        if np.any(np.diff(t) <= 0):
            raise DomainError("sample times must increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_field(cls, field_, x, omega=None):
        """Read ``u(s, x + w(s))`` off a solved field at every time node."""
        s = field_.grid.times
        pos = curve_positions(s, x, omega)
        return cls(s, field_.at(s, pos), float(x), field_.seed)

    @property
    def T(self):
        return float(self.times[-1])

    def up_to(self, t):
        """Samples on ``[0, t]``; the last one is interpolated if ``t`` is off-grid."""
        if not 0 < t <= self.T * (1 + 1e-12):
            raise DomainError(f"t must lie in (0, {self.T}]")
        k = int(np.searchsorted(self.times, t, side="left"))
        if k < self.times.size and abs(self.times[k] - t) <= 1e-12 * max(1.0, t):
            return self.times[:k + 1], self.values[:k + 1]
        v_t = np.interp(t, self.times, self.values)
        return np.append(self.times[:k], t), np.append(self.values[:k], v_t)


def curve_positions(times, x, omega=None):
    """``x + w(s)``; raises if the curve leaves ``[0, 1]``."""
    times = np.asarray(times, dtype=float)
    pos = np.full(times.shape, float(x)) if omega is None else float(x) + np.asarray(omega(times))
    if np.any((pos < -1e-12) | (pos > 1 + 1e-12)):
        raise DomainError("curve x + w(s) leaves [0, 1]")
    return np.clip(pos, 0.0, 1.0)


def sine_curve(amplitude=0.2, frequency=1.0):
    """``w(s) = amplitude * sin(2 pi frequency s)``, a Lipschitz test curve."""
    def omega(s):
        return amplitude * np.sin(2 * math.pi * frequency * np.asarray(s, dtype=float))
    return omega


@dataclass(frozen=True, eq=False)
class LocalTimeEstimate:
    t: float
    levels: np.ndarray = field(repr=False)
    L: np.ndarray = field(repr=False)
    dL: np.ndarray = field(repr=False)
    estimator: str
    metadata: dict = field(default_factory=dict)

    @property
    def spacing(self):
        return float(self.levels[1] - self.levels[0]) if self.levels.size > 1 else 1.0

    def mass(self):
        return float(np.sum(self.L) * self.spacing)

    def integrate(self, f):
        """``sum_j f(y_j) L(t, y_j) dy``."""
        return float(np.sum(f(self.levels) * self.L) * self.spacing)

    def total_variation(self):
        """``int |d_y L(t, y)| dy`` from the smoothed derivative."""
        return float(np.sum(np.abs(self.dL)) * self.spacing)

    def rows(self):
        return [(self.estimator, self.t, float(y), float(l), float(d))
                for y, l, d in zip(self.levels, self.L, self.dL)]


def _occupation_cdf(times, values, edges):
    """Time spent below each edge by the piecewise-linear path."""
    a, b = values[:-1], values[1:]
    w = np.diff(times)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    span = hi - lo
    flat = span == 0
    safe = np.where(flat, 1.0, span)
    frac = np.clip((edges[None, :] - lo[:, None]) / safe[:, None], 0.0, 1.0)
    frac[flat] = (edges[None, :] >= lo[flat, None]).astype(float)
    return w @ frac


def _smoothed_derivative(L, dy):
    return np.gradient(gaussian_filter1d(L, SMOOTH_BINS, mode="constant"), dy)


def level_grid(lo, hi, n_bins, pad=PAD_BINS):
    """Bin edges covering ``[lo, hi]`` with ``n_bins`` bins plus ``pad`` empty bins per side."""
    width = (hi - lo) / n_bins
    return lo + width * np.arange(-pad, n_bins + pad + 1)


def estimate_histogram(proc, t, n_bins=128, *, edges=None):
    """Exact bin occupation of the piecewise-linear path, divided by bin width.

    Parameters
    ----------
    proc : CurveProcess
    t : float
        Horizon, ``0 < t <= proc.T``.
    n_bins : int
        Bins across the range of the path (``>= 10``); eight empty bins
        are added on each side so the smoothed derivative decays to zero.
    edges : ndarray, optional
        Explicit uniform bin edges, overriding ``n_bins``.

    Returns
    -------
    LocalTimeEstimate
        ``dL`` is the central difference of ``L`` after Gaussian smoothing
        with a two-bin bandwidth.
    """
    if n_bins < 10:
        raise DomainError("need at least 10 bins")
    s, v = proc.up_to(t)
    lo, hi = float(v.min()), float(v.max())
    if edges is None:
        if hi == lo:
            warnings.warn("constant path: local time collapses to a single bin", RuntimeWarning)
            edges = np.array([lo - 0.5, lo + 0.5])
        else:
            edges = level_grid(lo, hi, n_bins)
    edges = np.asarray(edges, dtype=float)
    dy = edges[1] - edges[0]
    L = np.diff(_occupation_cdf(s, v, edges)) / dy
    levels = 0.5 * (edges[1:] + edges[:-1])
    dL = _smoothed_derivative(L, dy) if L.size > 1 else np.zeros(1)
    return LocalTimeEstimate(float(t), levels, L, dL, "histogram",
                             {"n_bins": int(L.size), "bin_width": float(dy)})


def _segment_transform(s, v, freqs):
    """``int_0^t exp(i u X_s) ds`` for the piecewise-linear path, exactly per segment."""
    a, b = v[:-1], v[1:]
    w = np.diff(s)
    d = b - a
    ua = np.exp(1j * np.outer(freqs, a))
    ub = np.exp(1j * np.outer(freqs, b))
    ud = np.outer(freqs, d)
    small = np.abs(ud) < 1e-6
    safe = np.where(small, 1.0, ud)
    seg = np.where(small, ua * (1 + 0.5j * ud - ud**2 / 6), (ub - ua) / (1j * safe))
    return seg @ w


def estimate_fourier(proc, t, u_cutoff=None, n_freq=512, levels=None, *, bin_width=None,
                     mass_tol=0.05):
    r"""Truncated Fourier inversion ``(2 pi)^-1 int_{-U}^{U} e^{-iuy} phi(u) du``.

    ``phi(u) = int_0^t exp(i u X_s) ds`` is computed exactly for the
    piecewise-linear path; the ``u``-integral is a trapezoid rule on
    ``n_freq`` points. ``u_cutoff`` defaults to ``40 / std(X)``.

    With ``bin_width`` set, each value is the average of the inverted
    density over ``[y - bin_width/2, y + bin_width/2]`` (the integrand gains
    a factor ``sinc(u bin_width / 2)``). This is the same quantity the
    histogram estimator reports, so the two are directly comparable.

    Raises
    ------
    DomainError
        If the mass on the level grid misses ``t`` by more than
        ``mass_tol`` (the cutoff is too small).
    """
    if n_freq < 64:
        raise DomainError("need at least 64 frequencies")
    s, v = proc.up_to(t)
    sd = float(np.std(v))
    if u_cutoff is None:
        if sd == 0:
            raise DomainError("constant path has no Fourier local time at finite cutoff")
        u_cutoff = 40.0 / sd
    if not u_cutoff > 0:
        raise DomainError("u_cutoff must be positive")
    if levels is None:
        edges = level_grid(float(v.min()), float(v.max()), 128)
        levels = 0.5 * (edges[1:] + edges[:-1])
    levels = np.asarray(levels, dtype=float)
    u = np.linspace(-u_cutoff, u_cutoff, n_freq)
    wq = np.full(n_freq, u[1] - u[0])
    wq[[0, -1]] *= 0.5
    phi = _segment_transform(s, v, u)
    if bin_width is not None:
        phi = phi * np.sinc(u * bin_width / (2 * math.pi))
    L = np.real(np.exp(-1j * np.outer(levels, u)) @ (wq * phi)) / (2 * math.pi)
    dy = levels[1] - levels[0] if levels.size > 1 else 1.0
    mass = float(np.sum(L) * dy)
    if abs(mass - t) > mass_tol * t:
        raise DomainError(f"Fourier mass {mass:.4g} misses t = {t} by more than {mass_tol:.0%}; "
                          f"increase u_cutoff (now {u_cutoff:.4g})")
    dL = _smoothed_derivative(L, dy)
    return LocalTimeEstimate(float(t), levels, L, dL, "fourier",
                             {"u_cutoff": float(u_cutoff), "n_freq": int(n_freq),
                              "bin_width": bin_width, "mass": mass, "min_L": float(L.min())})


def occupation_integral(proc, f, t, refine=16):
    """``int_0^t f(X_s) ds`` along the piecewise-linear path.

    Each segment is split into ``refine`` pieces and integrated by Simpson's rule.
    """
    s, v = proc.up_to(t)
    q = np.linspace(0.0, 1.0, 2 * refine + 1)
    x = v[:-1, None] + (v[1:] - v[:-1])[:, None] * q[None, :]
    fx = f(x)
    w = np.ones(q.size)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w /= 3.0 * (q.size - 1)
    return float(np.sum((fx @ w) * np.diff(s)))


def l2_distance(a, b):
    """Relative ``L^2`` distance of two estimates on common levels."""
    if a.levels.shape != b.levels.shape or not np.allclose(a.levels, b.levels):
        raise DomainError("estimates live on different level grids")
    return float(np.linalg.norm(a.L - b.L) / np.linalg.norm(a.L))


def driftless_curve_values(grid, x, omega, seeds, *, threads=1, chunk=None):
    """``X_s = u(s, x + w(s))`` at every time node for each seed, zero drift, zero start."""
    pos = curve_positions(grid.times, x, omega)
    seeds = list(seeds)
    drift = zero_drift()

    def run(block):
        return solve_batch(grid, drift, None, sample_noise_batch(grid, block), track=pos)

    return np.vstack(parallel_map(run, seed_blocks(grid, seeds, chunk),
                                  threads))


@dataclass
class HolderResult:
    lags: np.ndarray
    msd: np.ndarray
    se: np.ndarray
    slope: float
    intercept: float
    c_fit: float
    lower_bound: np.ndarray
    lower_ok: bool


def holder_exponent_check(grid, x, omega, lag_steps, seeds, *, t_min=0.25, n_bound=8,
                          threads=1, values=None):
    """Regress ``log E[(X_t - X_t')^2]`` on ``log(t - t')``.

    For each lag every pair with ``t' >= t_min`` on the grid contributes,
    averaged over seeds. The standard errors come from the per-seed pair
    averages. At up to ``n_bound`` end times per lag the mean square is also
    compared with the lower bound ``int_{t'}^t int G^2``, allowing 3 SE.

    Parameters
    ----------
    lag_steps : sequence of int
        Lags in time steps; at least four distinct values.
    values : ndarray, optional
        Precomputed :func:`driftless_curve_values` output.
    """
    lag_steps = np.unique(np.asarray(lag_steps, dtype=int))
    if lag_steps.size < 4:
        raise DomainError("need at least 4 lag values")
    seeds = list(seeds)
    if values is None:
        values = driftless_curve_values(grid, x, omega, seeds, threads=threads)
    i0 = int(math.ceil(t_min / grid.dt - 1e-9))
    pos = curve_positions(grid.times, x, omega)
    msd, se, bound, ok = [], [], [], True
    n = values.shape[0]
    for k in lag_steps:
        if i0 + k > grid.nt:
            raise DomainError(f"lag of {k} steps does not fit after t_min")
        d2 = (values[:, i0 + k:] - values[:, i0:-k]) ** 2
        per_seed = d2.mean(axis=1)
        msd.append(per_seed.mean())
        se.append(per_seed.std(ddof=1) / math.sqrt(n))
        ends = np.unique(np.linspace(i0 + k, grid.nt, n_bound).astype(int))
        lb = np.array([g_squared_time_integral(grid.times[e - k], grid.times[e], float(pos[e]))
                       for e in ends])
        emp = d2[:, ends - i0 - k]
        emp_mean = emp.mean(axis=0)
        emp_se = emp.std(axis=0, ddof=1) / math.sqrt(n)
        ok &= bool(np.all(emp_mean >= lb - 3 * emp_se))
        bound.append(lb.min())
    lags = lag_steps * grid.dt
    msd = np.array(msd)
    slope, intercept = np.polyfit(np.log(lags), np.log(msd), 1)
    return HolderResult(lags, msd, np.array(se), float(slope), float(intercept),
                        float(np.min(msd / np.sqrt(lags))), np.array(bound), ok)


@dataclass
class NondeterminismResult:
    cond_var: float
    ratio: float
    lower_bound: float
    condition_number: float
    regularized: bool


def local_nondeterminism_check(x, omega, past_times, t, *, cond_limit=1e12):
    """Gaussian conditional variance of ``X_t`` given ``X_{t_1}, ..., X_{t_n}``.

    Uses the exact covariance of the driftless field. ``ratio`` is the
    conditional variance over ``sqrt(t - t_n)``; ``lower_bound`` is
    ``int_{t_n}^t int G^2`` at ``x + w(t)``, the variance given the whole
    noise up to ``t_n``, which the conditional variance must exceed.
    Ill-conditioned past covariances are solved with Tikhonov shift and
    the condition number is reported.
    """
    past = np.asarray(past_times, dtype=float)
    if past.size > 12:
        raise DomainError("at most 12 conditioning times")
    if past.size and (np.any(np.diff(past) <= 0) or past[-1] >= t or past[0] <= 0):
        raise DomainError("need 0 < t_1 < ... < t_n < t")
    times = np.append(past, t)
    pos = curve_positions(times, x, omega)
    cov = covariance_matrix(times, pos)
    var_t = cov[-1, -1]
    t_n = past[-1] if past.size else 0.0
    lb = g_squared_time_integral(t_n, t, float(pos[-1]))
    if past.size == 0:
        return NondeterminismResult(float(var_t), float(var_t / math.sqrt(t)), lb, 1.0, False)
    s11 = cov[:-1, :-1]
    s12 = cov[:-1, -1]
    cond = float(np.linalg.cond(s11))
    regularized = cond > cond_limit
    if regularized:
        s11 = s11 + np.eye(past.size) * np.trace(s11) / past.size / cond_limit
    coef = np.linalg.solve(s11, s12)
    cv = float(var_t - s12 @ coef)
    return NondeterminismResult(cv, cv / math.sqrt(t - t_n), lb, cond, regularized)


def moment_bound_shape(m, t):
    """``t^(m/4) sqrt((2m)!) / Gamma(m/2 + 1)^(1/6)``, the C-free part of the bound."""
    m = np.asarray(m, dtype=float)
    return np.exp(m / 4 * math.log(t) + 0.5 * gammaln(2 * m + 1) - gammaln(m / 2 + 1) / 6)


@dataclass
class MomentStudy:
    t: float
    m: np.ndarray
    estimate: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    usable: np.ndarray
    C: float
    c_by_m: np.ndarray
    single_c: bool
    samples: np.ndarray = field(repr=False)

    def bound(self, C=None):
        return (self.C if C is None else C) ** self.m * moment_bound_shape(self.m, self.t)

    def rows(self):
        rhs = self.bound()
        return [(int(m), float(e), float(lo), float(hi), float(r))
                for m, e, lo, hi, r in zip(self.m, self.estimate, self.ci_lo, self.ci_hi, rhs)]


def total_variation_samples(grid, x, omega, seeds, t, n_bins=128, *, threads=1, values=None):
    """``int |d_y L(t, y)| dy`` per seed from the histogram estimator."""
    if values is None:
        values = driftless_curve_values(grid, x, omega, seeds, threads=threads)
    return np.array([estimate_histogram(CurveProcess(grid.times, v), t, n_bins).total_variation()
                     for v in values])


def moment_study(grid, x, omega, seeds, t, m_max=4, *, n_bins=128, n_boot=1000, boot_seed=0,
                 level=0.95, threads=1, samples=None):
    """Moments ``E[(int |d_y L(t, y)| dy)^m]`` with percentile bootstrap intervals.

    The fitted ``C`` is the smallest constant for which the upper interval
    ends satisfy ``C^m t^(m/4) sqrt((2m)!) / Gamma(m/2+1)^(1/6)`` for every
    ``m = 1 .. m_max``. An ``m`` whose interval is wider than its estimate is
    flagged unusable.
    """
    if m_max > 6:
        raise DomainError("m_max above 6 needs prohibitive ensembles")
    if samples is None:
        samples = total_variation_samples(grid, x, omega, seeds, t, n_bins, threads=threads)
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    m = np.arange(1, m_max + 1)
    powers = samples[:, None] ** m[None, :]
    est = powers.mean(axis=0)
    rng = Generator(Philox(key=(STREAM_BOOTSTRAP << 64) | int(boot_seed)))
    boot = np.empty((n_boot, m.size))
    for b in range(n_boot):
        boot[b] = powers[rng.integers(0, n, n)].mean(axis=0)
    alpha = 0.5 * (1 - level)
    lo, hi = np.quantile(boot, [alpha, 1 - alpha], axis=0)
    usable = (hi - lo) < est
    c_by_m = (hi / moment_bound_shape(m, t)) ** (1.0 / m)
    C = float(c_by_m.max())
    single = bool(np.all(est <= C**m * moment_bound_shape(m, t) * (1 + 1e-12)))
    return MomentStudy(float(t), m, est, lo, hi, usable, C, c_by_m, single, samples)
