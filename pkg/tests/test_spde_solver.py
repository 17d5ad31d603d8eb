import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spde_lab.errors import DomainError, GridMismatchError
from spde_lab.heat_kernel import g_squared_time_integral
from spde_lab.malliavin import bump_direction
from spde_lab.noise_field import SpaceTimeGrid, sample_noise, shift_noise
from spde_lab.spde_solver import (DriftSpec, HeatStep, PiecewiseConstant, cells_to_nodes,
                                  constant_drift, load_field, solve, solve_batch, solve_linearized,
                                  zero_drift)

SMALL = SpaceTimeGrid(0.5, 64, 16)


def trapezoid_mass(u, dx):
    return dx * (u[..., 1:-1].sum(axis=-1) + 0.5 * (u[..., 0] + u[..., -1]))


def discrete_variance(grid, i, j):
    """Exact variance of the driftless scheme at node (i, j) by propagating covariances."""
    n = grid.nx + 1
    r = grid.dt / grid.dx**2
    A = np.eye(n) * (1 + 2 * r) - r * (np.eye(n, k=1) + np.eye(n, k=-1))
    A[0, 1] = A[-1, -2] = -2 * r
    Ainv = np.linalg.inv(A)
    P = cells_to_nodes(np.eye(grid.nx), grid.dx).T  # nodes x cells
    q = P @ P.T * grid.dt * grid.dx
    cov = np.zeros((n, n))
    for _ in range(i):
        cov = Ainv @ (cov + q) @ Ainv.T
    return cov[j, j]


def test_heat_decay_first_order():
    errs = []
    for nt in (64, 128, 256):
        g = SpaceTimeGrid(0.5, nt, 128)
        u0 = np.cos(np.pi * g.nodes)
        u = solve_batch(g, zero_drift(), u0, np.zeros((1, nt, 128)))[0]
        exact = np.exp(-np.pi**2 * g.times)[:, None] * u0
        errs.append(np.max(np.abs(u - exact)))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders > 0.9)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1, 1))
def test_constant_drift_exact(c):
    u = solve_batch(SMALL, constant_drift(c), None, np.zeros((1, SMALL.nt, SMALL.nx)))[0]
    assert np.allclose(u, c * SMALL.times[:, None], atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(-1, 1))
def test_trapezoid_mass_balance(seed, c):
    noise = sample_noise(SMALL, seed)
    u = solve(SMALL, constant_drift(c), None, noise).values
    expected = c * SMALL.times + np.concatenate([[0], np.cumsum(noise.increments.sum(axis=1))])
    assert np.allclose(trapezoid_mass(u, SMALL.dx), expected, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(-1, 1), st.floats(0, 1))
def test_comparison_principle(seed, c, gap):
    noise = sample_noise(SMALL, seed)
    lo = solve(SMALL, constant_drift(c), None, noise).values
    hi = solve(SMALL, constant_drift(c + gap), None, noise).values
    assert np.all(hi >= lo - 1e-13)


def test_linear_in_noise_without_drift():
    a, b = sample_noise(SMALL, 1), sample_noise(SMALL, 2)
    ua = solve_batch(SMALL, zero_drift(), None, a.increments[None])[0]
    ub = solve_batch(SMALL, zero_drift(), None, b.increments[None])[0]
    both = solve_batch(SMALL, zero_drift(), None, (a.increments + 2 * b.increments)[None])[0]
    assert np.allclose(both, ua + 2 * ub, atol=1e-13)


def test_monte_carlo_matches_discrete_variance():
    g = SpaceTimeGrid(0.5, 64, 16)
    ref = discrete_variance(g, 64, 8)
    vals = solve_batch(g, zero_drift(), None,
                       np.stack([sample_noise(g, s).increments for s in range(3000)]),
                       track=0.5)[:, -1]
    se = ref * math.sqrt(2 / vals.size)
    assert abs(vals.var(ddof=1) - ref) < 3 * se


def test_discrete_variance_approaches_continuum():
    ref = g_squared_time_integral(0, 0.5, 0.5)
    coarse = abs(discrete_variance(SpaceTimeGrid(0.5, 32, 8), 32, 4) - ref)
    fine = abs(discrete_variance(SpaceTimeGrid(0.5, 256, 32), 256, 16) - ref)
    assert fine < coarse / 2
    assert fine < 0.02 * ref


def test_deterministic_replay(tmp_path):
    noise = sample_noise(SMALL, 42)
    drift = DriftSpec(np.sign, 1.0, name="sign")
    f1 = solve(SMALL, drift, 0.1, noise)
    f2 = solve(SMALL, drift, 0.1, noise)
    assert np.array_equal(f1.values, f2.values)
    f1.save(tmp_path / "f.bin")
    header, values = load_field(tmp_path / "f.bin")
    assert header["seed"] == 42 and header["drift"] == "sign"
    assert np.array_equal(values, f1.values)
    f1.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[4] == "t,x,u" and len(lines) == 5 + (SMALL.nt + 1) * (SMALL.nx + 1)


def test_nonfinite_drift_is_reported():
    bad = DriftSpec(lambda u: np.where(u > 0.05, np.nan, 0.0), 1.0)
    with pytest.raises(ArithmeticError, match="nan"):
        solve(SMALL, bad, 0.1, sample_noise(SMALL, 0))


def test_grid_mismatch():
    with pytest.raises(GridMismatchError):
        solve(SMALL, zero_drift(), None, sample_noise(SpaceTimeGrid(0.5, 32, 16), 0))
    with pytest.raises(GridMismatchError):
        solve_batch(SMALL, zero_drift(), np.zeros(5), np.zeros((1, SMALL.nt, SMALL.nx)))


def test_interpolation_and_node_access():
    f = solve(SMALL, zero_drift(), None, sample_noise(SMALL, 3))
    assert f.at(0.25, 0.5) == pytest.approx(f.value(0.25, 0.5))
    mid = f.at(0.25, 0.5 + 0.5 * SMALL.dx)
    assert mid == pytest.approx(0.5 * (f.value(0.25, 0.5) + f.value(0.25, 0.5 + SMALL.dx)))
    with pytest.raises(DomainError):
        f.at(0.7, 0.5)


def test_tracking_matches_full_field():
    inc = sample_noise(SMALL, 4).increments[None]
    full = solve_batch(SMALL, zero_drift(), None, inc)[0]
    tracked = solve_batch(SMALL, zero_drift(), None, inc, track=0.25)[0]
    assert np.allclose(tracked, full[:, 4])


def test_linearized_is_limit_of_shift_differences():
    drift = DriftSpec(np.tanh, 1.0, "c1", 1.0, lambda u: 1 / np.cosh(u) ** 2, name="tanh")
    h = bump_direction(SMALL.T)
    noise = sample_noise(SMALL, 9)
    base = solve(SMALL, drift, None, noise)
    v = solve_linearized(SMALL, base, h)
    errs = []
    for eps in (0.2, 0.1, 0.05):
        up = solve(SMALL, drift, None, shift_noise(noise, h, eps)).values
        down = solve(SMALL, drift, None, shift_noise(noise, h, -eps)).values
        errs.append(np.max(np.abs((up - down) / (2 * eps) - v)))
    # central differences: error falls by about 4 per halving
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3


def test_linearized_zero_drift_is_deterministic():
    h = bump_direction(SMALL.T)
    v1 = solve_linearized(SMALL, solve(SMALL, zero_drift(), None, sample_noise(SMALL, 1)), h)
    v2 = solve_linearized(SMALL, solve(SMALL, zero_drift(), None, sample_noise(SMALL, 2)), h)
    assert np.array_equal(v1, v2)


def test_linearized_needs_derivative():
    base = solve(SMALL, DriftSpec(np.sign, 1.0), None, sample_noise(SMALL, 0))
    with pytest.raises(DomainError):
        solve_linearized(SMALL, base, bump_direction(SMALL.T))


def test_drift_spec_validation():
    with pytest.raises(ValueError):
        DriftSpec(np.tanh, 1.0, "c1")
    with pytest.raises(ValueError):
        DriftSpec(np.tanh, 1.0, "smooth")
    with pytest.raises(ValueError, match="exceeds"):
        DriftSpec(lambda x: 2 * np.tanh(x), 1.0).validate()
    with pytest.raises(ValueError, match="derivative"):
        DriftSpec(np.tanh, 1.0, "c1", 1.0, lambda u: np.zeros_like(u)).validate()
    assert DriftSpec(np.tanh, 1.0).estimate_lipschitz() == pytest.approx(1.0, rel=1e-6)


def test_piecewise_constant():
    step = PiecewiseConstant((0.0, 1.0), (-1.0, 0.5, 2.0))
    assert list(step(np.array([-3, 0.0, 0.5, 1.0, 4]))) == [-1, -1, 0.5, 0.5, 2]
    with pytest.raises(ValueError):
        PiecewiseConstant((1.0, 0.0), (0, 1, 2))


def test_heat_step_preserves_constants():
    step = HeatStep(SpaceTimeGrid(1.0, 10, 12))
    assert np.allclose(step.solve(np.full(13, 3.0)), 3.0)
