r"""Permanents of the tridiagonal matrices ``M Sigma M^T`` built from time gaps.

For times ``t > s_1 > ... > s_m > 0`` set ``g_j = s_j - s_{j+1}`` (with
``s_{m+1} = 0``) and ``sigma_j = g_j^{-1/2}``. ``M`` is the upper bidiagonal
difference matrix, so ``M Sigma M^T`` has diagonal ``sigma_j + sigma_{j+1}``
(``sigma_m`` last) and off-diagonal ``-sigma_{j+1}``. Expanding the
permanent along the first row gives

    f_m = (sigma_1 + sigma_2) f_{m-1}(sigma_2, ...) + sigma_2^2 f_{m-2}(sigma_3, ...).

Two base cases are offered. ``"permanent"`` starts from ``f_0 = 1`` and
reproduces the true permanent. ``"printed"`` starts from
``f_2 = sigma_1 sigma_2 + sigma_2^2``, which undercounts the ``sigma_2^2`` term.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import gammaln

from .errors import DomainError, InfiniteVarianceError
from .noise_field import STREAM_SIMPLEX

RYSER_MAX = 14
EXPAND_MAX = 20
BASES = ("printed", "permanent")


@dataclass(frozen=True)
class GapVector:
    """Decreasing times ``s_1 > ... > s_m > 0`` and their gaps.

    ``gaps[j] = s[j] - s[j+1]`` with ``s[m] = 0``, so ``s[j] = gaps[j:].sum()``.
    """

    s: np.ndarray
    gaps: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.s.ndim != 1 or self.s.size < 1:
            raise DomainError("need at least one time")
        if np.any(self.gaps <= 0) or not np.all(np.isfinite(self.gaps)):
            raise DomainError("all gaps must be positive and finite")

    @classmethod
    def from_times(cls, s):
        s = np.asarray(s, dtype=float)
        gaps = s - np.append(s[1:], 0.0)
        return cls(s, gaps)

    @classmethod
    def from_gaps(cls, gaps):
        gaps = np.asarray(gaps, dtype=float)
        if np.any(gaps <= 0):
            raise DomainError("all gaps must be positive")
        return cls(np.cumsum(gaps[::-1])[::-1], gaps)

    @property
    def m(self):
        return self.s.size

    @property
    def sigma(self):
        return self.gaps ** -0.5


@dataclass(frozen=True)
class TridiagSystem:
    """``M Sigma M^T`` as diagonal ``a`` (length m) and off-diagonal ``b`` (length m-1)."""

    a: np.ndarray
    b: np.ndarray
    gaps: GapVector

    @classmethod
    def from_gaps(cls, gaps):
        sig = gaps.sigma
        a = sig.copy()
        a[:-1] += sig[1:]
        return cls(a, -sig[1:], gaps)

    @property
    def m(self):
        return self.a.size

    def dense(self):
        return np.diag(self.a) + np.diag(self.b, 1) + np.diag(self.b, -1)


def direct_product(gaps):
    """``M Sigma M^T`` by explicit matrix multiplication."""
    m = gaps.m
    M = np.eye(m) - np.eye(m, k=1)
    return M @ np.diag(gaps.sigma) @ M.T


def recursion_values(sigma, base="permanent"):
    """``f_k`` evaluated on the trailing variables ``sigma[m-k:]`` for ``k = 0..m``."""
    if base not in BASES:
        raise ValueError(f"base must be one of {BASES}")
    sigma = np.asarray(sigma, dtype=float)
    m = sigma.size
    f = np.empty(m + 1)
    f[0] = 1.0
    f[1] = sigma[-1]
    for k in range(2, m + 1):
        x1, x2 = sigma[m - k], sigma[m - k + 1]
        if k == 2 and base == "printed":
            f[k] = x1 * x2 + x2 * x2
        else:
            f[k] = (x1 + x2) * f[k - 1] + x2 * x2 * f[k - 2]
    return f


def permanent_recursive(gaps, base="permanent"):
    """Permanent of ``M Sigma M^T`` through the three-term recursion.

    Parameters
    ----------
    gaps : GapVector
    base : {"permanent", "printed"}
        ``"printed"`` uses ``f_2 = sigma_1 sigma_2 + sigma_2^2`` as printed.
    """
    if not isinstance(gaps, GapVector):
        gaps = GapVector.from_gaps(gaps)
    return float(recursion_values(gaps.sigma, base)[-1])


def permanent_ryser(matrix):
    """Exact permanent by Ryser's inclusion-exclusion over a Gray code, ``O(2^m m)``."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError("permanent needs a square matrix")
    m = a.shape[0]
    if m > RYSER_MAX:
        raise DomainError(f"Ryser oracle limited to m <= {RYSER_MAX}, got {m}")
    if m == 0:
        return 1.0
    row_sums = np.zeros(m)
    total = 0.0
    sign = -1.0
    prev = 0
    for k in range(1, 2**m):
        gray = k ^ (k >> 1)
        j = (gray ^ prev).bit_length() - 1
        row_sums += a[:, j] if gray & (1 << j) else -a[:, j]
        prev = gray
        sign = -sign
        total += sign * np.prod(row_sums)
    # sign alternates with |S|; Gray steps change |S| by one, so parity tracks k
    return float(total * (-1) ** (m + 1))


@dataclass
class PermanentPolynomial:
    """``p_m = sum_alpha c_alpha x^alpha`` with combined like terms.

    ``raw_terms`` is the number of monomials produced by the recursion
    before like terms are merged.
    """

    m: int
    terms: dict
    raw_terms: int

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return float(sum(c * np.prod(x ** np.array(a)) for a, c in self.terms.items()))

    def max_coefficient(self):
        return max(self.terms.values())

    def degree_ok(self):
        return all(a[0] <= 1 and max(a) <= 2 for a in self.terms)

    def dump(self, path):
        with open(path, "w") as fh:
            for a, c in sorted(self.terms.items()):
                fh.write(" ".join(map(str, a)) + f" {c}\n")


def _raw_expand(m):
    """Uncombined monomial list of ``p_m`` (printed base); exponents as tuples."""
    if m == 1:
        return [(1,)]
    if m == 2:
        return [(1, 1), (0, 2)]
    out = []
    for a in _raw_expand(m - 1):
        out.append((1,) + a)
        out.append((0, a[0] + 1) + a[1:])
    for a in _raw_expand(m - 2):
        out.append((0, 2) + a)
    return out


def expand_polynomial(m, *, raw_limit=12):
    """Expand ``p_m = (x_1 + x_2) p_{m-1}(x_2, ...) + x_2^2 p_{m-2}(x_3, ...)``.

    Base cases ``p_1 = x_1`` and ``p_2 = x_1 x_2 + x_2^2``. For ``m <= raw_limit``
    the uncombined monomials are generated and counted explicitly; above it
    the raw count is propagated through the same expansion.
    """
    if int(m) != m or m < 1:
        raise DomainError("m must be a positive integer")
    if m > EXPAND_MAX:
        raise DomainError(f"expansion limited to m <= {EXPAND_MAX}")
    if m <= raw_limit:
        raw = _raw_expand(m)
        terms = defaultdict(int)
        for a in raw:
            terms[a] += 1
        return PermanentPolynomial(m, dict(terms), len(raw))
    polys = {1: ({(1,): 1}, 1), 2: ({(1, 1): 1, (0, 2): 1}, 2)}
    for k in range(3, m + 1):
        p1, r1 = polys[k - 1]
        p2, r2 = polys[k - 2]
        terms = defaultdict(int)
        for a, c in p1.items():
            terms[(1,) + a] += c
            terms[(0, a[0] + 1) + a[1:]] += c
        for a, c in p2.items():
            terms[(0, 2) + a] += c
        polys[k] = (dict(terms), 2 * r1 + r2)
        polys.pop(k - 2)
    terms, raw = polys[m]
    return PermanentPolynomial(m, terms, raw)


def gamma_count(m):
    """``gamma_m = 2 gamma_{m-1} + gamma_{m-2}`` with ``gamma_1 = 1``, ``gamma_2 = 2``."""
    if int(m) != m or m < 1:
        raise DomainError("m must be a positive integer")
    a, b = 1, 2
    if m == 1:
        return 1
    for _ in range(m - 2):
        a, b = b, 2 * b + a
    return b


def log_dirichlet_det_integral(m, t, p):
    """Log of :func:`dirichlet_det_integral`."""
    if not 0 <= p < 4:
        raise DomainError(f"the gap integral diverges for p >= 4 (got p = {p})")
    if t <= 0 or m < 1:
        raise DomainError("need t > 0 and m >= 1")
    a = 1.0 - p / 4.0
    return m * a * math.log(t) + m * gammaln(a) - gammaln(m * a + 1)


def dirichlet_det_integral(m, t, p):
    r"""``int_{0 < s_m < ... < s_1 < t} prod_j g_j^{-p/4} ds``, in closed form.

    Equal to ``t^(m a) Gamma(a)^m / Gamma(m a + 1)`` with ``a = 1 - p/4``
    (a Dirichlet integral over the gaps).
    """
    return math.exp(log_dirichlet_det_integral(m, t, p))


def _generator(seed, chunk):
    return Generator(Philox(key=(STREAM_SIMPLEX << 64) | int(seed)).jumped(chunk))


def sample_gaps(m, t, n, alpha, seed=0, chunk=0):
    """Gaps ``t * Dirichlet(alpha, ..., alpha, 1)`` minus the slack, shape ``(n, m)``,
    with the log proposal density."""
    rng = _generator(seed, chunk)
    y = rng.dirichlet(np.append(np.full(m, alpha), 1.0), size=n)[:, :m]
    y = np.maximum(y, np.finfo(float).tiny)
    g = t * y
    log_q = (gammaln(m * alpha + 1) - m * gammaln(alpha) + (alpha - 1) * np.log(y).sum(axis=1)
             - m * math.log(t))
    return g, log_q


def sample_gaps_uniform(m, t, n, seed=0, chunk=0):
    """Gaps of sorted uniforms on ``[0, t]`` (uniform on the simplex), density ``m!/t^m``."""
    rng = _generator(seed, chunk)
    s = -np.sort(-rng.random((n, m)), axis=1) * t
    g = s - np.concatenate([s[:, 1:], np.zeros((n, 1))], axis=1)
    log_q = np.full(n, gammaln(m + 1) - m * math.log(t))
    return np.maximum(g, np.finfo(float).tiny), log_q


def hill_tail_index(w, k=None):
    """Hill estimate of the tail index of positive weights (larger is lighter)."""
    w = np.sort(np.asarray(w, dtype=float))[::-1]
    if k is None:
        k = max(10, int(math.sqrt(w.size)))
    logs = np.log(w[:k]) - math.log(w[k])
    xi = float(logs.mean())
    return math.inf if xi <= 0 else 1.0 / xi


@dataclass
class SimplexEstimate:
    m: int
    t: float
    beta: float
    estimate: float
    se: float
    tail_index: float
    n_mc: int

    @property
    def root(self):
        """``estimate ** (1/m)`` for the geometric-growth check."""
        return self.estimate ** (1.0 / self.m)

    @property
    def root_ci(self):
        lo = max(self.estimate - 2 * self.se, 0.0)
        return lo ** (1.0 / self.m), (self.estimate + 2 * self.se) ** (1.0 / self.m)

    def row(self):
        return (self.m, self.beta, self.t, self.estimate, self.se, self.root)


def _importance(m, t, n_mc, seed, proposal, alpha, chunk_size, integrand):
    chunks = []
    for c, lo in enumerate(range(0, n_mc, chunk_size)):
        n = min(chunk_size, n_mc - lo)
        if proposal == "dirichlet":
            g, log_q = sample_gaps(m, t, n, alpha, seed, c)
        elif proposal == "uniform":
            g, log_q = sample_gaps_uniform(m, t, n, seed, c)
        else:
            raise ValueError(f"unknown proposal {proposal!r}")
        chunks.append(np.exp(integrand(g) - log_q))
    return np.concatenate(chunks)


def _summarize(w, m, t, beta, n_mc, min_tail):
    tail = hill_tail_index(w)
    if tail < min_tail:
        raise InfiniteVarianceError(
            f"importance weights look heavy tailed (Hill index {tail:.2f} < {min_tail}); "
            f"use a larger beta, the Dirichlet proposal or stratification")
    return SimplexEstimate(m, t, beta, float(np.mean(w)), float(w.std(ddof=1) / math.sqrt(w.size)),
                           tail, n_mc)


def simplex_integral_beta(m, t, beta, n_mc=10**5, *, seed=0, base="permanent", proposal="dirichlet",
                          alpha=None, chunk_size=2**16, min_tail=2.0):
    r"""Monte Carlo estimate of ``int_{0 < s_m < ... < s_1 < t} |f_m(s)|^beta ds``.

    Parameters
    ----------
    m : int
    t : float
    beta : float in (0, 1)
    n_mc : int
        Number of samples, at least ``10^4``.
    base : {"permanent", "printed"}
    proposal : {"dirichlet", "uniform"}
        ``"dirichlet"`` draws gaps from ``t Dirichlet(alpha, ..., alpha, 1)``
        with ``alpha = 1 - beta`` by default, which matches the worst gap
        singularity ``g^-beta`` of ``|f_m|^beta`` and keeps the weights bounded.
        ``"uniform"`` uses sorted uniforms.
    min_tail : float
        Hill tail index below which the variance is declared infinite.

    Raises
    ------
    InfiniteVarianceError
        If the Hill index of the importance weights is below ``min_tail``.
    """
    if not 0 < beta < 1:
        raise DomainError("beta must lie in (0, 1)")
    if n_mc < 10**4:
        raise DomainError("need n_mc >= 10^4")
    alpha = 1.0 - beta if alpha is None else alpha

    w = _importance(m, t, n_mc, seed, proposal, alpha, chunk_size, _vector_integrand(m, beta, base))
    return _summarize(w, m, t, beta, n_mc, min_tail)


def _vector_integrand(m, beta, base):
    def log_integrand(g):
        sig = g ** -0.5
        n = g.shape[0]
        f_prev2 = np.ones(n)
        f_prev = sig[:, -1].copy()
        for k in range(2, m + 1):
            x1, x2 = sig[:, m - k], sig[:, m - k + 1]
            if k == 2 and base == "printed":
                f_new = x1 * x2 + x2 * x2
            else:
                f_new = (x1 + x2) * f_prev + x2 * x2 * f_prev2
            f_prev2, f_prev = f_prev, f_new
        return beta * np.log(f_prev)
    return log_integrand


def gap_power_mc(m, t, p, n_mc=10**6, *, seed=0, alpha=0.4, chunk_size=2**16):
    """Monte Carlo estimate of the gap integral of :func:`dirichlet_det_integral`.

    Independent of the closed form. Gaps are drawn by stick breaking from
    Beta variables, and the proposal density is the product of the
    ``scipy.stats.beta`` densities times the stick Jacobian.
    """
    from scipy.stats import beta as beta_dist

    rng_chunks = []
    for c, lo in enumerate(range(0, n_mc, chunk_size)):
        n = min(chunk_size, n_mc - lo)
        rng = _generator(seed, c)
        remaining = np.ones(n)
        log_q = np.zeros(n)
        g = np.empty((n, m))
        for j in range(m):
            # stick j takes a Beta(alpha, (m - j - 1) alpha + 1) share of what is left
            b = (m - j - 1) * alpha + 1.0
            v = rng.beta(alpha, b, size=n)
            v = np.maximum(v, np.finfo(float).tiny)
            log_q += beta_dist.logpdf(v, alpha, b) - np.log(remaining)
            g[:, j] = v * remaining
            remaining = remaining * (1 - v)
        g *= t
        log_q -= m * math.log(t)
        rng_chunks.append(np.exp(-(p / 4.0) * np.log(g).sum(axis=1) - log_q))
    w = np.concatenate(rng_chunks)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size))
