import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.stats import norm

from mfhb.boltzmann import (PartitionUnderflow, ThetaDensity, apply_T, average_comparisons,
                            compare_empirical, f_lambda, gibbs_masses, grid_infimum, histogram,
                            optimality_gaps, project_simplex, run_metadata, sample_cells,
                            solve_fixed_point)
from mfhb.core import ConfigError, Ensemble, RegularizerSpec, RunConfig, init_ensemble
from mfhb.model import GridKernels, GridSpec, potential_field
from mfhb.presets import desk_dataset_2d, desk_problem_1d


def line_grid(n=200, half=6.0):
    return GridSpec((-half,), (half,), (n,))


def test_linear_operator_ignores_its_input():
    g = line_grid()
    K = GridKernels.linear_potential(g.points()[:, 0], np.cos(g.points()[:, 0]))
    reg = RegularizerSpec.quadratic(0.5)
    a = apply_T(ThetaDensity.uniform(g), K, reg, 2.0)
    b = apply_T(ThetaDensity.gaussian(g, 2.0, 0.3), K, reg, 2.0)
    assert np.array_equal(a.values, b.values)


def test_quadratic_potential_gives_gaussian():
    g = line_grid(4000, 8.0)
    K = GridKernels.linear_potential(g.points()[:, 0], np.zeros(4000))
    out = apply_T(ThetaDensity.uniform(g), K, RegularizerSpec.quadratic(1.0), 1.0)
    edges = np.linspace(-8.0, 8.0, 4001)
    exact = np.diff(norm.cdf(edges))
    exact /= exact.sum()
    assert np.abs(out.masses - exact).sum() < 1e-6


def test_constant_shift_in_potential_is_invisible():
    prob = desk_problem_1d()
    rho = ThetaDensity.gaussian(prob.grid, 1.0, 2.0)
    base = apply_T(rho, prob.kernels, prob.reg, 4.0)
    fv = prob.kernels.first_variation(rho.masses, prob.reg)
    np.testing.assert_allclose(gibbs_masses(fv + 7.0, 4.0), base.masses, rtol=1e-12, atol=1e-300)
    assert abs(base.mass - 1) < 1e-10


def test_underflow_is_reported():
    with pytest.raises(PartitionUnderflow):
        gibbs_masses(np.array([np.nan, 1.0]), 1.0)
    with pytest.raises(ConfigError):
        apply_T(ThetaDensity.uniform(line_grid(10)),
                GridKernels.linear_potential(np.zeros(10), np.zeros(10)), RegularizerSpec.none(), 0.0)


def test_linear_case_converges_in_one_iteration():
    g = line_grid(100)
    K = GridKernels.linear_potential(g.points()[:, 0], 0.5 * g.points()[:, 0] ** 2)
    res = solve_fixed_point(ThetaDensity.gaussian(g, 3.0, 0.2), K, RegularizerSpec.none(), 2.0, damping=1.0)
    assert res.converged and res.iterations == 1 and res.residual == 0.0


def test_fixed_point_is_unique_and_stable():
    prob = desk_problem_1d()
    inits = [ThetaDensity.uniform(prob.grid), ThetaDensity.gaussian(prob.grid, 4.0, 0.3)]
    res = [solve_fixed_point(i, prob.kernels, prob.reg, 8.0, tol=1e-11) for i in inits]
    assert all(r.converged for r in res)
    assert res[0].density.l1_distance(res[1].density) < 1e-6
    again = apply_T(res[0].density, prob.kernels, prob.reg, 8.0)
    assert again.l1_distance(res[0].density) < 1e-10


def test_budget_exhaustion_returns_best_iterate():
    prob = desk_problem_1d()
    res = solve_fixed_point(ThetaDensity.gaussian(prob.grid, 4.0, 0.3), prob.kernels, prob.reg, 8.0,
                            max_iter=2)
    assert not res.converged and res.iterations == 2 and np.isfinite(res.residual)
    with pytest.raises(ConfigError):
        solve_fixed_point(ThetaDensity.uniform(prob.grid), prob.kernels, prob.reg, 8.0, damping=0.0)


def test_f_lambda_endpoints_and_monotonicity():
    prob = desk_problem_1d()
    rho = ThetaDensity.gaussian(prob.grid, 0.5, 1.5)
    full = prob.kernels.objective(rho.masses, prob.reg)
    plain = prob.kernels.objective(rho.masses, RegularizerSpec.none())
    assert f_lambda(rho, prob.kernels, prob.reg, 1.0) == full
    assert f_lambda(rho, prob.kernels, prob.reg, 0.0) == pytest.approx(plain, abs=1e-15)
    vals = [f_lambda(rho, prob.kernels, prob.reg, lam) for lam in np.linspace(0, 1, 11)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ConfigError):
        f_lambda(rho, prob.kernels, prob.reg, 1.5)


def test_f_lambda_matches_dense_quadrature():
    data = desk_dataset_2d()
    grid = GridSpec((-3.0, -3.0), (3.0, 3.0), (6, 7))
    K = GridKernels.from_dataset(data, grid.points())
    reg = RegularizerSpec.smoothed_norm(0.05)
    rng = np.random.default_rng(3)
    pts = grid.points()
    for _ in range(5):
        w = rng.dirichlet(np.ones(42))
        lam = rng.random()
        psi = sum(wi * pts[i, 1] / (1 + np.exp(-pts[i, 0] * data.features[:, 0])) for i, wi in enumerate(w))
        g = 0.05 * np.sqrt(np.sum(pts**2, axis=1) + 1e-6)
        dense = 0.5 * np.mean((psi - data.labels) ** 2) + lam * (g @ w)
        rho = ThetaDensity.from_masses(grid, w)
        assert f_lambda(rho, K, reg, lam) == pytest.approx(dense, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_simplex_projection(v):
    v = np.array(v)
    p = project_simplex(v)
    assert abs(p.sum() - 1) < 1e-12 and p.min() >= 0
    # optimality: (v - p) is constant on the support and not larger off it
    diff = v - p
    on = p > 1e-12
    assert np.ptp(diff[on]) < 1e-9
    if (~on).any():
        assert diff[~on].max() <= diff[on].min() + 1e-9


def test_grid_infimum_matches_generic_solver():
    prob = desk_problem_1d(n_cells=24)
    val, w, gap = grid_infimum(prob.kernels, prob.reg)
    assert gap < 1e-9 and abs(w.sum() - 1) < 1e-12
    n = prob.kernels.n_cells
    ref = minimize(lambda x: prob.kernels.objective(x, prob.reg), np.full(n, 1.0 / n), method="SLSQP",
                   bounds=[(0, 1)] * n, constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1}],
                   options={"ftol": 1e-14, "maxiter": 500})
    assert val <= ref.fun + 1e-10
    assert val == pytest.approx(ref.fun, abs=1e-7)


def test_optimality_gap_is_positive():
    prob = desk_problem_1d(n_cells=64)
    rows = optimality_gaps(ThetaDensity.uniform(prob.grid), prob.kernels, prob.reg, [4.0, 16.0])
    assert all(r.gap > 0 for r in rows) and rows[1].gap < rows[0].gap


def test_comparison_statistics_against_exact_sampling():
    data = desk_dataset_2d()
    cfg = RunConfig(n=50, beta=2.0, seed=2)
    ens = init_ensemble(cfg)
    grid = GridSpec((-4.0, -4.0), (4.0, 4.0), (10, 10))
    reg = RegularizerSpec.smoothed_norm()
    comp = compare_empirical(ens, data, cfg.act, reg, 2.0, grid)
    np.testing.assert_allclose(comp.boltzmann_field,
                               -2.0 * potential_field(ens, data, grid.points(), cfg.act, reg))
    draws = sample_cells(comp.field_mass, grid, 100_000, seed=4)
    hist, overflow = histogram(draws, grid)
    assert overflow == 0.0
    assert np.abs(hist - comp.field_mass).sum() < 0.05


def test_single_particle_histogram_is_one_hot():
    data = desk_dataset_2d()
    grid = GridSpec((-2.0, -2.0), (2.0, 2.0), (4, 4))
    ens = Ensemble(np.array([[0.3, -1.2]]), np.zeros((1, 2)))
    comp = compare_empirical(ens, data, RunConfig().act, RegularizerSpec.none(), 1.0, grid)
    assert sorted(comp.hist.tolist()) == [0.0] * 15 + [1.0]
    far = Ensemble(np.array([[9.0, 9.0]]), np.zeros((1, 2)))
    comp = compare_empirical(far, data, RunConfig().act, RegularizerSpec.none(), 1.0, grid)
    assert comp.overflow == 1.0 and comp.l1_gap == 2.0
    # the histogram is normalized over the particles inside the grid
    both = Ensemble(np.array([[0.3, -1.2], [9.0, 9.0]]), np.zeros((2, 2)))
    comp = compare_empirical(both, data, RunConfig().act, RegularizerSpec.none(), 1.0, grid)
    assert comp.hist.sum() == 1.0 and comp.overflow == 0.5
    assert comp.l1_gap == pytest.approx(np.abs(comp.field_mass - comp.hist).sum())


def test_larger_beta_sharpens_field():
    data = desk_dataset_2d()
    ens = init_ensemble(RunConfig(n=30, seed=1))
    grid = GridSpec((-3.0, -3.0), (3.0, 3.0), (12, 12))
    reg = RegularizerSpec.smoothed_norm()
    a = compare_empirical(ens, data, RunConfig().act, reg, 5.0, grid)
    b = compare_empirical(ens, data, RunConfig().act, reg, 50.0, grid)
    assert b.field_mass.max() > a.field_mass.max()
    assert np.argmax(a.field_mass) == np.argmax(b.field_mass)
    pot = -a.boltzmann_field / 5.0
    assert np.argmax(gibbs_masses(pot + 123.0, 5.0)) == np.argmax(a.field_mass)


def test_average_comparisons():
    data = desk_dataset_2d()
    grid = GridSpec((-3.0, -3.0), (3.0, 3.0), (5, 5))
    comps = [compare_empirical(init_ensemble(RunConfig(n=40, seed=s)), data, RunConfig().act,
                               RegularizerSpec.none(), 3.0, grid) for s in range(3)]
    avg = average_comparisons(comps)
    np.testing.assert_allclose(avg.hist, np.mean([c.hist for c in comps], axis=0))
    assert avg.l1_gap == pytest.approx(np.abs(avg.field_mass - avg.hist).sum())
    assert avg.to_csv().splitlines()[0] == "theta1,theta2,log_density,field_mass,particle_mass"
    with pytest.raises(ValueError):
        average_comparisons([])


def test_density_outputs():
    g = GridSpec((0.0,), (1.0,), (4,))
    rho = ThetaDensity.uniform(g)
    assert rho.to_csv().splitlines() == ["theta1,value", "0.125,1.0", "0.375,1.0", "0.625,1.0", "0.875,1.0"]
    res = solve_fixed_point(rho, GridKernels.linear_potential(g.points()[:, 0], np.zeros(4)),
                            RegularizerSpec.none(), 1.0)
    assert '"iterations"' in run_metadata(1.0, res)
    with pytest.raises(ConfigError):
        ThetaDensity(g, np.array([1.0, -1.0, 1.0, 1.0]))
