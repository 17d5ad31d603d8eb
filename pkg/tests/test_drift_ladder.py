import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from spde_lab.drift_ladder import (BUMP_MASS, LadderStudy, comb_drift, comparison_check,
                                   convergence_study, inf_limit, mollify, named_drift, rho,
                                   rho_cdf, rho_prime, running_min, sign_drift, smooth_sine,
                                   step_drift)
from spde_lab.errors import DomainError
from spde_lab.noise_field import SpaceTimeGrid

# mpmath, 30 digits
BUMP_MASS_REF = 0.443993816168079437823
CDF_AT_03 = 0.740907974643807978663


def test_bump_mass():
    assert BUMP_MASS == pytest.approx(BUMP_MASS_REF, rel=1e-14)


def test_rho_is_a_unit_mass_even_bump():
    mass, _ = integrate.quad(rho, -1, 1)
    assert mass == pytest.approx(1.0, abs=1e-12)
    y = np.linspace(-1.2, 1.2, 101)
    assert np.allclose(rho(y), rho(-y))
    assert np.all(rho(np.array([-1.0, 1.0, 1.5])) == 0)


def test_rho_prime_matches_difference():
    y = np.linspace(-0.95, 0.95, 41)
    fd = (rho(y + 1e-6) - rho(y - 1e-6)) / 2e-6
    assert np.allclose(fd, rho_prime(y), atol=1e-6)


def test_rho_cdf():
    assert rho_cdf(0.3) == pytest.approx(CDF_AT_03, abs=1e-13)
    assert rho_cdf(0.0) == pytest.approx(0.5, abs=1e-14)
    assert rho_cdf(-2.0) == 0.0 and rho_cdf(1.0) == 1.0


@pytest.mark.parametrize("n", [1, 4, 37])
def test_mollified_step_closed_form(n):
    # b_n(x) = int_{-1}^{n x} rho for the indicator of x > 0
    b = mollify(step_drift(), n)
    assert b(0.3 / n) == pytest.approx(CDF_AT_03, abs=1e-13)
    assert b(-2.0 / n) == 0.0 and b(2.0 / n) == 1.0


@pytest.mark.parametrize("x", [-0.4, 0.0, 0.13, 0.9])
def test_quadrature_route_matches_adaptive_quad(x):
    base = smooth_sine(1.0, 3.0)
    n = 5
    ref, _ = integrate.quad(lambda y: n * rho(n * (x - y)) * math.sin(3 * y), x - 1 / n, x + 1 / n)
    assert mollify(base, n)(np.array(x)) == pytest.approx(ref, abs=1e-10)


def test_step_and_quadrature_routes_agree():
    # sign through the exact step formula and through the generic quadrature
    plain = named_drift("sign")
    no_steps = type(plain)(plain.b, 1.0, name="sign-q")
    x = np.linspace(-0.5, 0.5, 81)
    # the 401-point rule sees the jump with O(jump * max rho / 200) error
    assert np.max(np.abs(mollify(plain, 6)(x) - mollify(no_steps, 6)(x))) < 1e-2


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 300), st.sampled_from(["sign", "step", "comb", "smooth-sine", "arctan"]))
def test_sup_norm_stability(n, name):
    base = named_drift(name)
    x = np.linspace(-3, 3, 2001)
    member = mollify(base, n)
    assert np.max(np.abs(member(x))) <= base.sup_norm + 1e-12
    assert np.max(np.abs(member.as_drift().b(x))) <= base.sup_norm + 1e-12


def test_mollification_converges_for_smooth_drift():
    base = smooth_sine(1.0, 1.0)
    x = np.linspace(-2, 2, 101)
    errs = [np.max(np.abs(mollify(base, n)(x) - np.sin(x))) for n in (4, 8, 16)]
    # second-order in 1/n for an even kernel
    assert errs[1] < errs[0] / 3.5 and errs[2] < errs[1] / 3.5


def test_lipschitz_grows_with_n_for_step():
    # sup of the derivative is n rho(0); the table quotient sees it to O(h^2)
    for n in (2, 20):
        assert mollify(step_drift(), n).lipschitz == pytest.approx(n * math.exp(-1) / BUMP_MASS,
                                                                   rel=1e-3)


def test_derivative_of_mollification():
    m = mollify(sign_drift(), 3)
    x = np.linspace(-0.5, 0.5, 21)
    fd = (m(x + 1e-6) - m(x - 1e-6)) / 2e-6
    assert np.allclose(fd, m.derivative(x), atol=1e-5)
    table = m.as_drift()
    assert np.allclose(table.bprime(x), m.derivative(x), atol=1e-3)


def test_running_min_is_below_each_member():
    rm = running_min(step_drift(), 2, 9)
    # at the table nodes; in between the linear interpolant may sit slightly above
    x = rm.table_x[(rm.table_x > -1) & (rm.table_x < 1)]
    for j in range(2, 10):
        assert np.all(rm(x) <= mollify(step_drift(), j)(x) + 1e-12)


def test_running_min_decreases_in_k():
    x = np.linspace(-1, 1, 401)
    vals = [running_min(sign_drift(), 2, k, spacing_k=32)(x) for k in (2, 4, 8, 32)]
    for a, b in zip(vals, vals[1:]):
        assert np.all(b <= a)


def test_running_min_needs_ordered_indices():
    with pytest.raises(DomainError):
        running_min(step_drift(), 5, 3)
    with pytest.raises(DomainError):
        mollify(step_drift(), 0)


def test_inf_limit_converges():
    lim = inf_limit(sign_drift(), 4)
    assert lim.converged
    x = np.linspace(-1, 1, 201)
    assert np.all(lim(x) <= running_min(sign_drift(), 4, 8)(x) + 1e-12)


def test_inf_limit_of_step_is_the_lower_envelope():
    # for the indicator the infimum over j >= n vanishes for x <= 0 and tends to 1 for x > 0
    lim = inf_limit(step_drift(), 2)
    assert lim(np.array([-0.2]))[0] == 0.0
    assert lim(np.array([0.6]))[0] == 1.0


def test_comb_is_plus_minus_one():
    c = comb_drift(level=2, extent=2.0)
    x = np.array([0.1, 0.3, 0.6, -0.1, 5.0])
    assert set(np.unique(c(x))) <= {-1.0, 1.0}


def test_named_drift_unknown():
    with pytest.raises(KeyError):
        named_drift("cubic")


def test_ladder_study_monotonicity_rule():
    s = LadderStudy([(2, 4), (4, 16)], 100, np.array([1.0, 1.1]), np.array([0.1, 0.1]),
                    np.array([0.2]), np.array([0.01]))
    assert s.nonincreasing()
    s.mse[1] = 1.5
    assert not s.nonincreasing()


def test_convergence_study_small():
    g = SpaceTimeGrid(0.25, 32, 8)
    s = convergence_study(step_drift(), g, None, (0.25, 0.5), range(100), [(2, 4), (8, 32)])
    assert s.mse.shape == (2,) and np.all(s.mse >= 0)
    assert s.mse[1] < s.mse[0]
    with pytest.raises(DomainError):
        convergence_study(step_drift(), g, None, (0.25, 0.5), range(10), [(2, 4)])


def test_comparison_principle_on_ladder():
    g = SpaceTimeGrid(0.25, 64, 8)
    res = comparison_check(step_drift(), g, None, 2, [2, 4, 16], range(5))
    assert res.holds()
    assert res.step_ratio < 1
