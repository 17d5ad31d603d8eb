import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spde_lab.errors import DomainError, InfiniteVarianceError
from spde_lab.permanent_bounds import (GapVector, TridiagSystem, dirichlet_det_integral,
                                       direct_product, expand_polynomial, gamma_count,
                                       gap_power_mc, hill_tail_index, permanent_recursive,
                                       permanent_ryser, recursion_values, sample_gaps,
                                       sample_gaps_uniform, simplex_integral_beta)

PELL = [1, 2, 5, 12, 29, 70, 169, 408]


def permanent_by_permutations(a):
    n = a.shape[0]
    return sum(math.prod(a[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


gap_lists = st.lists(st.floats(0.01, 5.0), min_size=1, max_size=8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10**6))
def test_ryser_matches_permutation_sum(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    assert permanent_ryser(a) == pytest.approx(permanent_by_permutations(a), rel=1e-10, abs=1e-12)


def test_ryser_known_values():
    assert permanent_ryser(np.ones((4, 4))) == pytest.approx(24.0)
    assert permanent_ryser(np.eye(5)) == 1.0


def test_unit_gaps_instance():
    g = GapVector.from_gaps([1.0, 1.0])
    assert permanent_recursive(g, "printed") == 2.0
    assert permanent_recursive(g, "permanent") == 3.0
    assert permanent_ryser(TridiagSystem.from_gaps(g).dense()) == pytest.approx(3.0)


@settings(max_examples=40, deadline=None)
@given(gap_lists)
def test_corrected_recursion_is_the_permanent(gaps):
    g = GapVector.from_gaps(gaps)
    ryser = permanent_ryser(TridiagSystem.from_gaps(g).dense())
    assert permanent_recursive(g) == pytest.approx(ryser, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(gap_lists)
def test_dense_matches_explicit_product(gaps):
    g = GapVector.from_gaps(gaps)
    assert np.allclose(TridiagSystem.from_gaps(g).dense(), direct_product(g))


def test_gap_vector_round_trip():
    g = GapVector.from_times([0.9, 0.5, 0.2])
    assert np.allclose(g.gaps, [0.4, 0.3, 0.2])
    assert np.allclose(GapVector.from_gaps(g.gaps).s, [0.9, 0.5, 0.2])
    with pytest.raises(DomainError):
        GapVector.from_times([0.2, 0.5])


def test_gamma_is_the_pell_sequence():
    assert [gamma_count(m) for m in range(1, 9)] == PELL
    assert [expand_polynomial(m).raw_terms for m in range(1, 9)] == PELL


def test_raw_count_propagation_beyond_explicit_limit():
    assert expand_polynomial(14).raw_terms == gamma_count(14)
    with pytest.raises(DomainError):
        expand_polynomial(21)


@pytest.mark.parametrize("m", range(1, 13))
def test_coefficients_and_degrees(m):
    p = expand_polynomial(m)
    assert p.max_coefficient() <= 3**m
    assert p.degree_ok()
    assert all(sum(a) == m for a in p.terms)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=6, max_size=6))
def test_expansion_evaluates_to_printed_recursion(x):
    x = np.array(x)
    assert expand_polynomial(6)(x) == pytest.approx(recursion_values(x, "printed")[-1], rel=1e-10)


def test_polynomial_dump(tmp_path):
    expand_polynomial(3).dump(tmp_path / "p3.txt")
    lines = (tmp_path / "p3.txt").read_text().splitlines()
    assert len(lines) == len(expand_polynomial(3).terms)


def test_dirichlet_closed_form_small_cases():
    # m = 1: int_0^t g^{-p/4} dg = t^a / a with a = 1 - p/4
    assert dirichlet_det_integral(1, 2.0, 1.0) == pytest.approx(2.0**0.75 / 0.75)
    # p = 0 gives the simplex volume t^m / m!
    assert dirichlet_det_integral(3, 1.5, 0.0) == pytest.approx(1.5**3 / 6)
    with pytest.raises(DomainError):
        dirichlet_det_integral(2, 1.0, 4.0)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_dirichlet_closed_form_against_stick_breaking(m):
    est, se = gap_power_mc(m, 1.0, 2.0, 200_000, seed=m)
    assert abs(est - dirichlet_det_integral(m, 1.0, 2.0)) < 3 * se


def test_gap_samplers_live_on_the_simplex():
    g, _ = sample_gaps(4, 2.0, 1000, 0.5, seed=1)
    assert np.all(g > 0) and np.all(g.sum(axis=1) <= 2.0 + 1e-12)
    u, log_q = sample_gaps_uniform(4, 2.0, 1000, seed=1)
    assert np.all(u.sum(axis=1) <= 2.0 + 1e-12)
    assert np.allclose(log_q, math.log(24) - 4 * math.log(2.0))


def test_simplex_single_gap_exact():
    # |f_1|^(1/2) = g^(-1/4), integral 4/3
    est = simplex_integral_beta(1, 1.0, 0.5, 100_000, seed=3)
    assert abs(est.estimate - 4 / 3) < 4 * est.se


def test_uniform_proposal_is_flagged_heavy_tailed():
    with pytest.raises(InfiniteVarianceError, match="Hill"):
        simplex_integral_beta(8, 1.0, 0.75, 100_000, seed=0, proposal="uniform")


def test_simplex_estimate_row_and_root():
    est = simplex_integral_beta(2, 1.0, 0.75, 20_000, seed=4)
    m, beta, t, value, se, root = est.row()
    assert (m, beta, t) == (2, 0.75, 1.0)
    assert root == pytest.approx(value**0.5)
    lo, hi = est.root_ci
    assert lo <= root <= hi


def test_simplex_argument_checks():
    with pytest.raises(DomainError):
        simplex_integral_beta(2, 1.0, 1.0)
    with pytest.raises(DomainError):
        simplex_integral_beta(2, 1.0, 0.5, 100)


def test_hill_index_of_pareto():
    rng = np.random.default_rng(0)
    w = rng.pareto(1.5, 200_000) + 1.0
    assert hill_tail_index(w) == pytest.approx(1.5, rel=0.1)
