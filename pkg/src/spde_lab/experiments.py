"""Named experiments shared by the command line runner and the acceptance tests.

Each experiment reads a resolved configuration (see :mod:`spde_lab.config`)
and reports to a sink: data rows with fixed columns, and named summary
values. The runner streams both to CSV; :func:`run_experiment` collects
them in memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.stats import kurtosis, skew

from . import heat_kernel as hk
from .drift_ladder import comparison_check, convergence_study, mollify, named_drift
from .errors import ConfigError
from .local_time import (CurveProcess, driftless_curve_values, estimate_fourier,
                         estimate_histogram, holder_exponent_check, l2_distance,
                         local_nondeterminism_check, moment_study, occupation_integral,
                         sine_curve)
from .malliavin import (bump_direction, deriv_feynman_kac, deriv_linearized,
                        derivative_free_log_constant, linearized_samples, second_moment_study,
                        shift_fd_samples)
from .noise_field import Direction, SpaceTimeGrid, sample_noise
from .permanent_bounds import (GapVector, TridiagSystem, dirichlet_det_integral, expand_polynomial,
                               gamma_count, gap_power_mc, permanent_recursive, permanent_ryser,
                               simplex_integral_beta)
from .spde_solver import solve, solve_batch, zero_drift

STREAM_INSTANCES = 4


class MemorySink:
    """Collects rows and summary values."""

    def __init__(self):
        self.rows = []
        self.summary = {}

    def row(self, *values):
        self.rows.append(tuple(values))

    def note(self, key, value):
        self.summary[key] = value


@dataclass
class Outcome:
    experiment: str
    columns: tuple
    rows: list
    summary: dict
    config: dict = field(repr=False)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def quantity(self, name):
        """Row of a long-format table whose first field equals ``name``."""
        for r in self.rows:
            if r[0] == name:
                return r
        raise KeyError(name)


@dataclass(frozen=True)
class Experiment:
    name: str
    columns: tuple
    func: object
    params: dict
    n_seeds: int = 0
    grid: dict = None
    drift: dict = None
    direction: dict = None
    description: str = ""


DEFAULT_GRID = {"T": 1.0, "nt": 512, "nx": 64}
BUMP = {"name": "bump", "center": [0.3, 0.5], "width": [0.15, 0.2], "unit": True}


# construction helpers ----------------------------------------------------

def make_grid(cfg):
    g = cfg["grid"]
    return SpaceTimeGrid(float(g["T"]), int(g["nt"]), int(g["nx"]))


def make_drift(spec):
    spec = dict(spec)
    name = spec.pop("name")
    mollify_n = spec.pop("mollify", 0)
    d = named_drift(name, **spec)
    return mollify(d, int(mollify_n)).as_drift() if mollify_n else d


def make_direction(spec, T):
    spec = dict(spec)
    name = spec.pop("name")
    if name == "bump":
        return bump_direction(T, tuple(spec.get("center", BUMP["center"])),
                              tuple(spec.get("width", BUMP["width"])), bool(spec.get("unit", True)))
    if name == "constant":
        c = float(spec.get("value", 1.0))
        return Direction(lambda t, x: np.full(np.broadcast(t, x).shape, c), T, "constant")
    raise ConfigError(f"direction.name: unknown direction {name!r} (bump, constant)")


def make_omega(name, amplitude, frequency):
    if name == "zero":
        return None
    if name == "sine":
        return sine_curve(amplitude, frequency)
    raise ConfigError(f"params.omega: unknown curve {name!r} (zero, sine)")


# experiments ---------------------------------------------------------------

def kernel_band(cfg, sink):
    p = cfg["params"]
    gaps = np.logspace(math.log10(p["gap_min"]), math.log10(p["gap_max"]), p["n_gaps"])
    band = hk.fit_band(gaps, p["positions"])
    for i, g in enumerate(band.gaps):
        for j, x in enumerate(band.positions):
            sink.row(float(g), float(x), float(band.ratios[i, j]))
    sink.note("band_lower", band.lower)
    sink.note("band_upper", band.upper)
    sink.note("band_ratio", band.upper / band.lower)

    pts = np.linspace(0.0, 1.0, p["n_xy"])
    X, Y = np.meshgrid(pts, pts, indexing="ij")
    worst = 0.0
    for t in np.logspace(-2, 0, p["n_times"]):
        worst = max(worst, float(np.max(np.abs(hk.green_images(t, X, Y) - hk.green_spectral(t, X, Y)))))
    sink.note("images_vs_spectral_max", worst)

    z, w = np.polynomial.legendre.leggauss(p["ck_nodes"])
    z, w = 0.5 * (z + 1.0), 0.5 * w
    ck_pts = np.linspace(0.0, 1.0, p["ck_points"])
    worst = 0.0
    for t, s in p["ck_pairs"]:
        left = hk.green(t, ck_pts[:, None], z[None, :])
        right = hk.green(s, z[:, None], ck_pts[None, :])
        lhs = (left * w[None, :]) @ right
        rhs = hk.green(t + s, ck_pts[:, None], ck_pts[None, :])
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    sink.note("chapman_kolmogorov_max", worst)


def heat_decay_errors(T, nx, nts, mode=1):
    """Sup-error of the noise-free scheme against ``exp(-(k pi)^2 t) cos(k pi x)``."""
    errors = []
    for nt in nts:
        grid = SpaceTimeGrid(T, int(nt), int(nx))
        u0 = np.cos(mode * math.pi * grid.nodes)
        u = solve_batch(grid, zero_drift(), u0, np.zeros((1, grid.nt, grid.nx)))[0]
        exact = np.exp(-((mode * math.pi) ** 2) * grid.times)[:, None] * u0[None, :]
        errors.append(float(np.max(np.abs(u - exact))))
    return np.array(errors)


def gaussian_variance(cfg, sink):
    p = cfg["params"]
    grid = make_grid(cfg)
    seeds = cfg["seeds"]
    t, x = p["t"], p["x"]
    vals = driftless_curve_values(grid, x, None, seeds, threads=cfg["threads"])[:, grid.time_index(t)]
    n = vals.size
    ref = hk.g_squared_time_integral(0.0, t, x)
    dev2 = (vals - vals.mean()) ** 2
    sink.row("mean", float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n)), 0.0)
    sink.row("variance", float(vals.var(ddof=1)), float(dev2.std(ddof=1) / math.sqrt(n)), ref)
    sink.row("skewness", float(skew(vals)), math.sqrt(6.0 / n), 0.0)
    sink.row("excess_kurtosis", float(kurtosis(vals)), math.sqrt(24.0 / n), 0.0)
    nts = p["heat_nts"]
    err = heat_decay_errors(p["heat_T"], p["heat_nx"], nts, p["heat_mode"])
    for nt, e in zip(nts, err):
        sink.row(f"heat_error_dt=1/{int(round(nt / p['heat_T']))}", float(e), 0.0, float("nan"))
    orders = np.log(err[:-1] / err[1:]) / np.log(np.asarray(nts[1:], float) / np.asarray(nts[:-1], float))
    order = float(np.polyfit(-np.log(p["heat_T"] / np.asarray(nts, float)), -np.log(err), 1)[0])
    sink.row("heat_order_fit", order, 0.0, 1.0)
    sink.row("heat_order_min", float(orders.min()), 0.0, 1.0)


def malliavin_compare(cfg, sink):
    p = cfg["params"]
    grid = make_grid(cfg)
    drift = make_drift(cfg["drift"])
    h = make_direction(cfg["direction"], grid.T)
    probe = (p["t"], p["x"])
    seeds = cfg["seeds"]
    n = len(seeds)
    eps = p["eps"] or None
    fd = shift_fd_samples(grid, drift, None, seeds, h, probe, eps, threads=cfg["threads"])
    lin = linearized_samples(grid, drift, None, seeds, h, probe, threads=cfg["threads"])
    root = math.sqrt(n)
    se_fd, se_lin = fd.value.std(ddof=1) / root, lin.std(ddof=1) / root
    diff = fd.value - lin
    sink.row("shift_fd_mean", float(fd.value.mean()), float(se_fd), float(lin.mean()))
    sink.row("linearized_mean", float(lin.mean()), float(se_lin), float("nan"))
    sink.row("paired_difference", float(diff.mean()), float(diff.std(ddof=1) / root), 0.0)
    sink.row("paired_max_relative",
             float(np.max(np.abs(diff)) / max(float(np.max(np.abs(lin))), 1e-300)), 0.0, 0.0)
    sink.note("eps", fd.eps)
    sink.note("combined_se", float(math.hypot(se_fd, se_lin)))

    base = solve(grid, drift, None, sample_noise(grid, p["field_seed"]))
    ref = deriv_linearized(grid, base, h, probe)
    fk = deriv_feynman_kac(base, h, probe, p["n_paths"], seed=p["path_seed"])
    sink.row("linearized_single", ref.value, 0.0, float("nan"))
    sink.row("feynman_kac_single", fk.value, fk.std_error, ref.value)


def fitted_local_time_constant(grid, p, seeds, threads):
    """``C`` from a moment study of the driftless field; used as ``C_lt``."""
    study = moment_study(grid, p["lt_x"], None, seeds, p["lt_t"], p["lt_m_max"],
                         n_bins=p["lt_bins"], n_boot=p["lt_boot"], threads=threads)
    return study.C


def derivative_free(cfg, sink):
    p = cfg["params"]
    grid = make_grid(cfg)
    base = make_drift(cfg["drift"])
    h = make_direction(cfg["direction"], grid.T)
    probe = (p["t"], p["x"])
    family = [mollify(base, int(k)).as_drift() for k in p["kappas"]]
    study = second_moment_study(family, grid, None, h, probe, cfg["seeds"], threads=cfg["threads"])
    band = hk.fit_band(np.logspace(-4, 0, 30), [0.0, 0.25, 0.5, 0.75, 1.0])
    lt_seeds = range(p["lt_seed"], p["lt_seed"] + p["lt_seeds"])
    C_lt = fitted_local_time_constant(grid, p, lt_seeds, cfg["threads"])
    log_C = derivative_free_log_constant(base.sup_norm, C_lt, band.upper, grid.T)
    scale = math.log(math.sqrt(study.t) * study.h_norm**2)
    for r in study.rows:
        sink.row(r.name, r.lipschitz, r.estimate, r.se, r.ratio, log_C + scale)
    sink.note("spread", study.spread())
    sink.note("slope", study.slope)
    sink.note("blowup", study.blowup)
    sink.note("h_norm", study.h_norm)
    sink.note("C_band", band.upper)
    sink.note("C_lt", C_lt)
    sink.note("log_C", log_C)
    sink.note("band_bound", band.upper * math.sqrt(study.t) * study.h_norm**2)


def ladder_convergence(cfg, sink):
    p = cfg["params"]
    grid = make_grid(cfg)
    base = make_drift(cfg["drift"])
    study = convergence_study(base, grid, None, (p["t"], p["x"]), cfg["seeds"], p["schedule"],
                              threads=cfg["threads"])
    for r in study.rows():
        sink.row(*r)
    sink.note("nonincreasing", study.nonincreasing())
    sink.note("cauchy", [float(c) for c in study.cauchy])
    seeds = cfg["seeds"][: p["comparison_seeds"]]
    comp = comparison_check(base, grid, None, p["comparison_n"], p["comparison_ks"], seeds,
                            threads=cfg["threads"])
    sink.note("comparison_max_violation", comp.max_violation)
    sink.note("comparison_step_ratio", comp.step_ratio)


OCCUPATION_TESTS = {
    "exp": np.exp,
    "lorentz": lambda y: 1.0 / (1.0 + y**2),
    "quadratic": lambda y: 1.0 + y**2,
}


def localtime(cfg, sink):
    p = cfg["params"]
    grid = make_grid(cfg)
    omega = make_omega(p["omega"], p["omega_amplitude"], p["omega_frequency"])
    t = p["t"]
    values = driftless_curve_values(grid, p["x"], omega, cfg["seeds"], threads=cfg["threads"])
    occ, l2, mass = [], [], []
    for v in values:
        proc = CurveProcess(grid.times, v)
        hist = estimate_histogram(proc, t, p["n_bins"])
        mass.append(abs(hist.mass() - t) / t)
        for f in OCCUPATION_TESTS.values():
            exact = occupation_integral(proc, f, t)
            occ.append(abs(hist.integrate(f) - exact) / abs(exact))
        coarse = estimate_histogram(proc, t, p["fourier_bins"])
        _, path = proc.up_to(t)
        four = estimate_fourier(proc, t, p["fourier_cutoff"] / float(np.std(path)), p["n_freq"],
                                coarse.levels, bin_width=coarse.spacing)
        l2.append(l2_distance(coarse, four))
    sink.row("occupation_max_relative_error", float(max(occ)), 0.0, 0.02)
    sink.row("histogram_fourier_max_l2", float(max(l2)), 0.0, 0.05)
    sink.row("mass_max_relative_error", float(max(mass)), 0.0, 0.01)

    hgrid = SpaceTimeGrid(p["holder_T"], p["holder_nt"], p["holder_nx"])
    hseeds = range(cfg["seed"], cfg["seed"] + p["holder_seeds"])
    hold = holder_exponent_check(hgrid, p["x"], None, p["holder_lags"], hseeds,
                                 t_min=p["holder_t_min"], threads=cfg["threads"])
    for lag, m, s in zip(hold.lags, hold.msd, hold.se):
        sink.row(f"holder_msd_lag={lag:.6g}", float(m), float(s), float("nan"))
    sink.row("holder_slope", hold.slope, 0.0, 0.5)
    sink.note("holder_lower_bound_ok", hold.lower_ok)

    c_band = hk.fit_band(np.logspace(-4, 0, 30), np.linspace(0.0, 1.0, 5)).lower
    ratios, certified, worst_gap = [], True, math.inf
    t_end = p["nd_t"]
    for n_past in p["nd_past_counts"]:
        for gap in p["nd_gaps"]:
            t_n = t_end - gap
            past = np.linspace(t_n / n_past, t_n, n_past)
            r = local_nondeterminism_check(p["x"], omega, past, t_end)
            ratios.append(r.ratio)
            certified &= r.cond_var >= r.lower_bound * (1 - 1e-9)
            worst_gap = min(worst_gap, r.cond_var - c_band * math.sqrt(gap))
    sink.row("nondeterminism_configs", float(len(ratios)), 0.0, 20.0)
    sink.row("nondeterminism_min_ratio", float(min(ratios)), 0.0, c_band)
    sink.row("nondeterminism_min_margin", float(worst_gap), 0.0, 0.0)
    sink.note("nondeterminism_certified", bool(certified))
    sink.note("c_band", c_band)


def moments(cfg, sink):
    p = cfg["params"]
    grid = make_grid(cfg)
    omega = make_omega(p["omega"], p["omega_amplitude"], p["omega_frequency"])
    study = moment_study(grid, p["x"], omega, cfg["seeds"], p["t"], p["m_max"], n_bins=p["n_bins"],
                         n_boot=p["n_boot"], boot_seed=cfg["seed"], threads=cfg["threads"])
    for r in study.rows():
        sink.row(*r)
    sink.note("C", study.C)
    sink.note("c_by_m", [float(c) for c in study.c_by_m])
    sink.note("single_c", study.single_c)
    sink.note("all_usable", bool(np.all(study.usable)))


def _random_gaps(rng, m):
    return rng.uniform(0.05, 2.0, m)


def permanent(cfg, sink):
    p = cfg["params"]
    rng = Generator(Philox(key=(STREAM_INSTANCES << 64) | int(cfg["seed"])))
    instances = [("sigma=(1,1)", GapVector.from_gaps([1.0, 1.0]))]
    per_m = max(1, p["n_instances"] // p["m_max"])
    for m in range(1, p["m_max"] + 1):
        for i in range(per_m):
            instances.append((f"random-{m}-{i}", GapVector.from_gaps(_random_gaps(rng, m))))
    worst = 0.0
    for label, g in instances:
        ryser = permanent_ryser(TridiagSystem.from_gaps(g).dense())
        corrected = permanent_recursive(g, "permanent")
        printed = permanent_recursive(g, "printed")
        rel = abs(corrected - ryser) / abs(ryser)
        if label.startswith("random"):
            worst = max(worst, rel)
        sink.row(g.m, label, printed, corrected, ryser, rel)
    sink.note("max_relative_error", worst)
    sink.note("random_instances", len(instances) - 1)
    gam = [gamma_count(m) for m in range(1, p["gamma_m"] + 1)]
    raw = [expand_polynomial(m).raw_terms for m in range(1, p["gamma_m"] + 1)]
    sink.note("gamma", gam)
    sink.note("raw_terms", raw)
    polys = [expand_polynomial(m) for m in range(1, p["poly_m"] + 1)]
    sink.note("coefficient_bound_ok", all(q.max_coefficient() <= 3**q.m for q in polys))
    sink.note("degree_ok", all(q.degree_ok() for q in polys))
    sink.note("max_coefficients", [int(q.max_coefficient()) for q in polys])


def simplex_beta(cfg, sink):
    p = cfg["params"]
    seed = cfg["seed"]
    ests = []
    for m in range(1, p["m_max"] + 1):
        e = simplex_integral_beta(m, p["t"], p["beta"], int(p["n_mc"]), seed=seed + m,
                                  proposal=p["proposal"])
        ests.append(e)
        sink.row(*e.row())
    roots = [e.root for e in ests]
    head_hi = max(e.root_ci[1] for e in ests[: p["m_max"] // 2])
    sink.note("roots", [float(r) for r in roots])
    sink.note("bounded", bool(max(roots[p["m_max"] // 2:]) <= head_hi))
    sink.note("tail_indices", [float(e.tail_index) for e in ests])
    checks = []
    for m in range(1, p["dirichlet_m"] + 1):
        exact = dirichlet_det_integral(m, p["t"], p["dirichlet_p"])
        est, se = gap_power_mc(m, p["t"], p["dirichlet_p"], int(p["dirichlet_n_mc"]), seed=seed + m)
        checks.append((m, exact, est, se, abs(est - exact) / se))
    sink.note("dirichlet", [list(map(float, c)) for c in checks])
    sink.note("dirichlet_max_z", float(max(c[-1] for c in checks)))


EXPERIMENTS = {e.name: e for e in [
    Experiment(
        "kernel-band", ("dt_gap", "x", "ratio"), kernel_band,
        {"n_gaps": 30, "gap_min": 1e-4, "gap_max": 1.0, "positions": [0.0, 0.25, 0.5, 0.75, 1.0],
         "n_xy": 20, "n_times": 12, "ck_pairs": [[0.01, 0.02], [0.05, 0.1], [0.3, 0.5]],
         "ck_nodes": 400, "ck_points": 11},
        description="heat kernel band, image vs spectral series, Chapman-Kolmogorov"),
    Experiment(
        "gaussian-variance", ("quantity", "value", "se", "reference"), gaussian_variance,
        {"t": 0.5, "x": 0.5, "heat_T": 1.0, "heat_nx": 256, "heat_nts": [128, 256, 512],
         "heat_mode": 1},
        n_seeds=2000, grid=DEFAULT_GRID,
        description="driftless variance, Gaussianity and heat-decay order"),
    Experiment(
        "malliavin-compare", ("quantity", "value", "se", "reference"), malliavin_compare,
        {"t": 0.5, "x": 0.5, "eps": 0.0, "n_paths": 2000, "path_seed": 0, "field_seed": 0},
        n_seeds=200, grid=DEFAULT_GRID, drift={"name": "arctan", "amplitude": 1.0, "slope": 2.0},
        direction=BUMP, description="shift difference, linearized and Feynman-Kac derivatives"),
    Experiment(
        "derivative-free", ("member", "lipschitz", "estimate", "se", "ratio", "log_bound_rhs"),
        derivative_free,
        {"t": 0.5, "x": 0.5, "kappas": [1, 10, 100], "lt_seeds": 1000, "lt_seed": 0, "lt_t": 1.0,
         "lt_x": 0.5, "lt_m_max": 4, "lt_bins": 128, "lt_boot": 500},
        n_seeds=500, grid=DEFAULT_GRID, drift={"name": "sign"}, direction=BUMP,
        description="second moment of the derivative along a mollified family"),
    Experiment(
        "ladder-convergence", ("n", "k", "seeds", "mse", "se"), ladder_convergence,
        {"t": 0.5, "x": 0.5, "schedule": [[2, 4], [4, 16], [8, 64], [16, 256]],
         "comparison_n": 2, "comparison_ks": [2, 4, 16, 64], "comparison_seeds": 20},
        n_seeds=400, grid=DEFAULT_GRID, drift={"name": "step"},
        description="running-minimum ladder against the direct solve"),
    Experiment(
        "localtime", ("quantity", "value", "se", "reference"), localtime,
        {"t": 1.0, "x": 0.5, "omega": "sine", "omega_amplitude": 0.2, "omega_frequency": 1.0,
         "n_bins": 128, "fourier_bins": 32, "fourier_cutoff": 40.0, "n_freq": 512,
         "holder_T": 0.5, "holder_nt": 8192, "holder_nx": 128, "holder_seeds": 1000,
         "holder_lags": [64, 128, 256, 512, 1024], "holder_t_min": 0.25,
         "nd_t": 0.6, "nd_past_counts": [1, 2, 4, 8, 12], "nd_gaps": [1e-3, 1e-2, 0.1, 0.3]},
        n_seeds=50, grid=DEFAULT_GRID,
        description="occupation identity, Fourier cross-check, Hoelder slope, non-determinism"),
    Experiment(
        "moments", ("m", "estimate", "ci_lo", "ci_hi", "bound_rhs"), moments,
        {"t": 1.0, "x": 0.5, "omega": "zero", "omega_amplitude": 0.2, "omega_frequency": 1.0,
         "m_max": 4, "n_bins": 128, "n_boot": 1000},
        n_seeds=5000, grid=DEFAULT_GRID, description="moments of the local-time total variation"),
    Experiment(
        "permanent", ("m", "instance", "printed_base", "corrected_base", "ryser", "relative_error"),
        permanent, {"m_max": 10, "n_instances": 100, "gamma_m": 8, "poly_m": 12},
        description="tridiagonal permanent recursion against Ryser"),
    Experiment(
        "simplex-beta", ("m", "beta", "t", "estimate", "se", "root"), simplex_beta,
        {"m_max": 8, "t": 1.0, "beta": 0.75, "n_mc": 100000, "proposal": "dirichlet",
         "dirichlet_m": 4, "dirichlet_p": 1.5, "dirichlet_n_mc": 200000},
        description="simplex integral of the permanent power and Dirichlet gap integrals"),
]}


def run_experiment(name, overrides=None, *, sink=None):
    """Resolve ``overrides`` against the defaults of ``name`` and run it."""
    from .config import resolve

    cfg = resolve({"experiment": name, **(overrides or {})})
    exp = EXPERIMENTS[name]
    sink = MemorySink() if sink is None else sink
    exp.func(cfg, sink)
    return Outcome(name, exp.columns, getattr(sink, "rows", []), getattr(sink, "summary", {}), cfg)
