r"""Neumann heat kernel on the unit interval.

The kernel :math:`G(t, x, y)` solves :math:`\partial_t G = \partial_x^2 G` on
``(0, 1)`` with zero-flux boundaries and :math:`G(0, x, \cdot) = \delta_x`.
Two series are available:

* images:   :math:`(4\pi t)^{-1/2}\sum_n e^{-(y-x-2n)^2/4t} + e^{-(y+x-2n)^2/4t}`
* spectral: :math:`1 + 2\sum_{n\ge1} e^{-n^2\pi^2 t}\cos(n\pi x)\cos(n\pi y)`

The image series converges quickly for small ``t`` and the cosine series for
large ``t``; :func:`green` switches between them at ``t = 0.05``.

Time integrals of the kernel reduce to one-dimensional integrals through the
semigroup property, e.g.

.. math::

    \int_{t'}^{t}\int_0^1 G^2(t-s, x, y)\,dy\,ds
        = \tfrac12 \int_0^{2(t-t')} G(r, x, x)\,dr .

These are evaluated with adaptive Gauss-Kronrod quadrature after the
substitution ``r = s**2`` that removes the ``r**-1/2`` endpoint singularity.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .errors import DomainError

SPECTRAL_SWITCH = 0.05
DEFAULT_TOL = 1e-13


class QuadResult(NamedTuple):
    value: float
    abserr: float


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise DomainError("time must be finite")
    if np.any(t <= 0):
        raise DomainError(f"kernel time must be positive, got min t = {t.min()!r}")
    return t


def _check_position(x, name):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be finite")
    if np.any((x < 0.0) | (x > 1.0)):
        raise DomainError(f"{name} must lie in [0, 1]")
    return x


def _image_count(t_max, tol):
    # excluded images sit at distance >= 2N from any point of [0, 1]
    arg = max(math.log(4.0 / (tol * math.sqrt(4.0 * math.pi * t_max))), 1.0)
    return int(math.ceil(math.sqrt(t_max * arg))) + 1


def _spectral_count(t_min, tol):
    return int(math.ceil(math.sqrt(math.log(4.0 / tol) / (math.pi**2 * t_min)))) + 1


def green_images(t, x, y, tol=DEFAULT_TOL):
    """Evaluate the kernel by the method of images.

    Broadcasts over ``t``, ``x`` and ``y``. Terms are summed for
    ``|n| <= N`` with ``N`` chosen so that the first omitted pair is below
    ``tol``.
    """
    t = _check_time(t)
    x = _check_position(x, "x")
    y = _check_position(y, "y")
    if tol <= 0:
        raise DomainError("tol must be positive")
    t, x, y = np.broadcast_arrays(t, x, y)
    n_img = _image_count(float(t.max()), tol)
    n = np.arange(-n_img, n_img + 1).reshape((-1,) + (1,) * t.ndim)
    four_t = 4.0 * t
    total = np.exp(-((y - x - 2 * n) ** 2) / four_t) + np.exp(-((y + x - 2 * n) ** 2) / four_t)
    return total.sum(axis=0) / np.sqrt(math.pi * four_t)


def green_spectral(t, x, y, tol=DEFAULT_TOL):
    """Evaluate the kernel by its cosine eigenfunction expansion."""
    t = _check_time(t)
    x = _check_position(x, "x")
    y = _check_position(y, "y")
    if tol <= 0:
        raise DomainError("tol must be positive")
    t, x, y = np.broadcast_arrays(t, x, y)
    n_max = _spectral_count(float(t.min()), tol)
    n = np.arange(1, n_max + 1).reshape((-1,) + (1,) * t.ndim)
    terms = np.exp(-(n**2) * math.pi**2 * t) * np.cos(n * math.pi * x) * np.cos(n * math.pi * y)
    return 1.0 + 2.0 * terms.sum(axis=0)


def green(t, x, y, tol=DEFAULT_TOL):
    """Neumann heat kernel ``G(t, x, y)`` to absolute accuracy ``tol``.

    Parameters
    ----------
    t : float or array
        Elapsed time, strictly positive.
    x, y : float or array
        Positions in ``[0, 1]``.
    tol : float
        Truncation tolerance for the series.

    Returns
    -------
    float or ndarray
        Kernel values, broadcast over the inputs.

    Raises
    ------
    DomainError
        If ``t <= 0``, a position is outside ``[0, 1]`` or an input is
        not finite.
    """
    t = _check_time(t)
    x = _check_position(x, "x")
    y = _check_position(y, "y")
    t, x, y = np.broadcast_arrays(t, x, y)
    out = np.empty(t.shape)
    small = t <= SPECTRAL_SWITCH
    if small.any():
        out[small] = green_images(t[small], x[small], y[small], tol)
    if (~small).any():
        out[~small] = green_spectral(t[~small], x[~small], y[~small], tol)
    return out[()] if out.ndim == 0 else out


def green_cdf(t, x, y):
    r"""Distribution function :math:`\int_0^y G(t, x, z)\,dz` of the
    reflected motion started at ``x``.

    Summed image by image with the normal distribution function, so it is
    exact up to the image truncation.
    """
    t = _check_time(t)
    x = _check_position(x, "x")
    y = _check_position(y, "y")
    t, x, y = np.broadcast_arrays(t, x, y)
    n_img = _image_count(float(t.max()), 1e-16)
    n = np.arange(-n_img, n_img + 1).reshape((-1,) + (1,) * t.ndim)
    s = np.sqrt(2.0 * t)
    direct = ndtr((y - x - 2 * n) / s) - ndtr((-x - 2 * n) / s)
    mirror = ndtr((y + x - 2 * n) / s) - ndtr((x - 2 * n) / s)
    out = (direct + mirror).sum(axis=0)
    return out[()] if out.ndim == 0 else out


def kernel_time_integral(r_lo, r_hi, x, y, *, epsabs=1e-13, epsrel=1e-11):
    r"""Adaptive quadrature of :math:`\int_{r_{lo}}^{r_{hi}} G(r, x, y)\,dr`.

    Integrates ``2 s G(s**2, x, y)`` over ``[sqrt(r_lo), sqrt(r_hi)]``,
    which is smooth even when ``r_lo = 0`` and ``x = y``.

    Returns
    -------
    QuadResult
        ``(value, abserr)`` as reported by QUADPACK.
    """
    if not (math.isfinite(r_lo) and math.isfinite(r_hi)):
        raise DomainError("integration limits must be finite")
    if r_lo < 0 or r_hi < r_lo:
        raise DomainError(f"need 0 <= r_lo <= r_hi, got ({r_lo}, {r_hi})")
    x = float(_check_position(x, "x"))
    y = float(_check_position(y, "y"))
    if r_hi == r_lo:
        return QuadResult(0.0, 0.0)

    def integrand(s):
        if s == 0.0:
            return 0.0
        return 2.0 * s * float(green(s * s, x, y))

    s_lo, s_hi = math.sqrt(r_lo), math.sqrt(r_hi)
    # the image peak of G(r, x, y) sits near r ~ (x - y)^2 / 2; help QUADPACK find it
    points = [p for p in (abs(x - y) / math.sqrt(2.0), (x + y) / math.sqrt(2.0),
                          (2.0 - x - y) / math.sqrt(2.0)) if s_lo < p < s_hi]
    value, err = integrate.quad(integrand, s_lo, s_hi, epsabs=epsabs, epsrel=epsrel,
                                limit=400, points=points or None)
    return QuadResult(value, err)


def g_squared_time_integral(t_lo, t_hi, x, *, full_output=False):
    r"""Evaluate :math:`\int_{t_{lo}}^{t_{hi}}\int_0^1 G^2(t_{hi}-s, x, y)\,dy\,ds`.

    By Chapman-Kolmogorov and symmetry the inner integral is
    ``G(2 (t_hi - s), x, x)``, leaving a one-dimensional quadrature.

    Parameters
    ----------
    t_lo, t_hi : float
        Interval with ``0 <= t_lo <= t_hi``. An empty interval gives 0.
    x : float
        Position in ``[0, 1]``.
    full_output : bool
        Return ``QuadResult(value, abserr)`` instead of the bare value.
    """
    if not (math.isfinite(t_lo) and math.isfinite(t_hi)):
        raise DomainError("times must be finite")
    if t_lo < 0:
        raise DomainError("t_lo must be non-negative")
    if t_lo > t_hi:
        raise DomainError(f"need t_lo <= t_hi, got ({t_lo}, {t_hi})")
    res = kernel_time_integral(0.0, 2.0 * (t_hi - t_lo), x, x)
    res = QuadResult(0.5 * res.value, 0.5 * res.abserr)
    return res if full_output else res.value


def covariance(t1, t2, x1, x2):
    r"""Covariance of the driftless field started from zero,

    .. math::

        \operatorname{Cov}(u(t_1, x_1), u(t_2, x_2))
            = \int_0^{t_1\wedge t_2}\int_0^1 G(t_1-s, x_1, y)G(t_2-s, x_2, y)\,dy\,ds
            = \tfrac12\int_{|t_1-t_2|}^{t_1+t_2} G(r, x_1, x_2)\,dr .
    """
    for v in (t1, t2, x1, x2):
        if not math.isfinite(v):
            raise DomainError("covariance arguments must be finite")
    if t1 <= 0 or t2 <= 0:
        raise DomainError("covariance times must be positive")
    res = kernel_time_integral(abs(t1 - t2), t1 + t2, x1, x2)
    return 0.5 * res.value


def covariance_matrix(times, positions):
    """Covariance matrix of ``u(times[i], positions[i])`` for the driftless field."""
    times = np.asarray(times, dtype=float)
    positions = np.broadcast_to(np.asarray(positions, dtype=float), times.shape)
    n = times.size
    cov = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            cov[i, j] = cov[j, i] = covariance(times[i], times[j], positions[i], positions[j])
    return cov


class BandFit(NamedTuple):
    lower: float
    upper: float
    ratios: np.ndarray
    gaps: np.ndarray
    positions: np.ndarray


def fit_band(gaps, positions):
    r"""Fit constants ``c <= C`` with
    ``c sqrt(gap) <= g_squared_time_integral(t - gap, t, x) <= C sqrt(gap)``
    over every ``(gap, x)`` pair supplied.

    ``ratios[i, j]`` belongs to ``gaps[i]`` and ``positions[j]``.
    """
    gaps = np.asarray(gaps, dtype=float)
    positions = np.asarray(positions, dtype=float)
    ratios = np.array([[g_squared_time_integral(0.0, g, x) / math.sqrt(g) for x in positions]
                       for g in gaps])
    return BandFit(float(ratios.min()), float(ratios.max()), ratios, gaps, positions)
