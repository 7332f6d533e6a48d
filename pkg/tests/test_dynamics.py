import math

import numpy as np
import pytest

from mfhb.core import (Dataset, Ensemble, Integrator, RegularizerSpec, RunConfig, TeacherSpec,
                       dataset_from_teacher, init_ensemble, sample_dataset)
from mfhb.dynamics import (CSV_COLUMNS, NumericalAbort, agd_step, damping, gf_step, hb_step,
                           records_csv, run_batch, run_trajectory, shb_step)
from mfhb.model import interaction_gradient, loss


def origin_data():
    """One sample at x = 0 with label 0: a single neuron sees risk b^2 / 8."""
    return Dataset(np.zeros((1, 1)), np.zeros(1))


def quad_energy(theta, r, c):
    a, b = theta
    return b * b / 8 + 0.5 * c * (a * a + b * b) + 0.5 * float(r @ r)


def single(theta, r=(0.0, 0.0)):
    return Ensemble(np.array([theta], dtype=float), np.array([r], dtype=float))


def test_origin_data_potential_is_the_expected_quadratic():
    c = 0.7
    theta = np.array([[0.4, -1.3]])
    g = interaction_gradient(theta, origin_data(), reg=RegularizerSpec.quadratic(c))
    np.testing.assert_allclose(g, [[c * 0.4, -1.3 / 4 - c * 1.3]], rtol=1e-15)


def test_frictionless_noiseless_step_by_hand():
    # potential |theta|^2 / 2 along the first weight, output weight parked at 0
    cfg = RunConfig(n=1, gamma=1e-300, beta=math.inf, dt=0.1, regularizer=RegularizerSpec.quadratic(1.0))
    out = shb_step(single([1.0, 0.0]), origin_data(), cfg, 0)
    assert out.theta.tolist() == [[1.0, 0.0]]
    assert out.r.tolist() == [[-0.1, 0.0]]
    assert out.time == pytest.approx(0.1)


def test_zero_force_is_a_fixed_point():
    teacher = TeacherSpec(np.array([[0.5, 1.0], [-1.0, 2.0]]))
    data = dataset_from_teacher(teacher, 20, seed=1)
    ens = Ensemble(teacher.theta, np.zeros((2, 2)))
    cfg = RunConfig(n=2, regularizer=RegularizerSpec.none())
    for step in (shb_step, hb_step, agd_step, gf_step):
        kwargs = {"noise": np.zeros((2, 2))} if step is shb_step else {}
        out = step(ens, data, cfg, 0, **kwargs)
        assert np.array_equal(out.theta, ens.theta) and np.array_equal(out.r, ens.r)


def test_shb_with_zero_noise_is_hb():
    data = sample_dataset(3, 2, 15, seed=2)
    cfg = RunConfig(d=3, n=6, seed=3, beta=2.0, regularizer=RegularizerSpec.smoothed_norm())
    ens = init_ensemble(cfg)
    a = shb_step(ens, data, cfg, 0, noise=np.zeros((6, 3)))
    b = hb_step(ens, data, cfg, 0)
    assert a == b
    assert shb_step(ens, data, cfg, 0) != b


def test_shb_determinism_and_threads():
    data = sample_dataset(2, 3, 30, seed=4)
    for n in (4, 150):
        cfg = RunConfig(n=n, steps=20, seed=5, record_every=5)
        ens1, rec1 = run_trajectory(cfg, data)
        ens2, rec2 = run_trajectory(cfg, data)
        ens4, rec4 = run_trajectory(cfg, data, threads=4)
        assert ens1 == ens2 == ens4
        assert records_csv(rec1) == records_csv(rec2) == records_csv(rec4)


def test_energy_decay_up_to_explicit_euler_excess():
    # f = b^2/8 + c|theta|^2/2 is a convex quadratic; explicit Euler raises the energy by
    # exactly dt^2 (|grad f + gamma r|^2 + r^T H r) / 2 per step, H the Hessian of f
    c, gamma = 0.5, 1.0
    hess = np.diag([c, 0.25 + c])
    data = origin_data()
    max_excess = {}
    for dt in (0.02, 0.01):
        cfg = RunConfig(n=1, gamma=gamma, dt=dt, regularizer=RegularizerSpec.quadratic(c),
                        integrator=Integrator.HB)
        ens = single([1.5, -2.0], [0.3, 0.1])
        energies = [quad_energy(ens.theta[0], ens.r[0], c)]
        worst = 0.0
        for k in range(1000):
            g = interaction_gradient(ens.theta, data, reg=cfg.regularizer)[0]
            r = ens.r[0]
            excess = 0.5 * dt * dt * (np.sum((g + gamma * r) ** 2) + r @ hess @ r)
            ens = hb_step(ens, data, cfg, k)
            energies.append(quad_energy(ens.theta[0], ens.r[0], c))
            diff = energies[-1] - energies[-2]
            assert diff == pytest.approx(excess - gamma * dt * (r @ r), abs=1e-14)
            worst = max(worst, diff)
        max_excess[dt] = worst
        assert energies[-1] < 1e-2 * energies[0]
    # whatever increase remains is second order in dt
    assert max_excess[0.01] <= max_excess[0.02] / 3.5


def test_agd_damping_decreases():
    cfg = RunConfig(gamma=3.0, t_floor=1.0, integrator=Integrator.AGD)
    vals = [damping(cfg, t) for t in np.linspace(1.0, 50.0, 200)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert damping(cfg, 0.0) == damping(cfg, 0.5) == 3.0
    assert damping(cfg.replace(integrator=Integrator.HB), 10.0) == 3.0


def test_agd_with_frozen_damping_is_hb():
    data = sample_dataset(3, 2, 20, seed=6)
    cfg = RunConfig(d=3, n=5, gamma=2.0, t_floor=1e6, integrator=Integrator.AGD)
    ens = init_ensemble(cfg)
    assert agd_step(ens, data, cfg, 0) == hb_step(ens, data, cfg.replace(gamma=2.0 / 1e6), 0)


def test_agd_beats_heavy_damping():
    # regression: strong damping slows HB, the vanishing AGD damping does not
    data = origin_data()
    reg = RegularizerSpec.quadratic(1.0)
    final = {}
    for integ in (Integrator.HB, Integrator.AGD):
        cfg = RunConfig(n=1, gamma=10.0, dt=0.01, steps=1000, record_every=1000,
                        integrator=integ, regularizer=reg)
        _, recs = run_trajectory(cfg, data, ensemble=single([2.0, 0.0]))
        final[integ] = recs[-1].loss
    assert final[Integrator.AGD] < final[Integrator.HB]


def test_gf_examples():
    cfg = RunConfig(n=1, dt=0.1, regularizer=RegularizerSpec.quadratic(1.0), integrator=Integrator.GF)
    out = gf_step(single([1.0, 0.0], [5.0, 5.0]), origin_data(), cfg, 0)
    assert out.theta.tolist() == [[0.9, 0.0]] and np.all(out.r == 0)
    data = sample_dataset(4, 3, 25, seed=7)
    cfg = RunConfig(d=4, n=8, dt=0.05, seed=8, regularizer=RegularizerSpec.smoothed_norm())
    ens = init_ensemble(cfg)
    expect = ens.theta - 0.05 * interaction_gradient(ens.theta, data, reg=cfg.regularizer)
    np.testing.assert_allclose(gf_step(ens, data, cfg, 0).theta, expect, rtol=1e-12, atol=1e-14)


def test_run_trajectory_zero_steps():
    data = sample_dataset(2, 2, 10, seed=1)
    cfg = RunConfig(n=5, steps=0)
    ens, recs = run_trajectory(cfg, data)
    assert ens == init_ensemble(cfg) and len(recs) == 1 and recs[0].step == 0


def test_hb_reduces_risk_on_desk_config():
    data = sample_dataset(5, 5, 60, seed=3)
    cfg = RunConfig(d=5, n=20, n0=5, m=60, steps=500, dt=0.05, integrator=Integrator.HB,
                    regularizer=RegularizerSpec.none(), record_every=100)
    _, recs = run_trajectory(cfg, data)
    assert recs[-1].risk < recs[0].risk
    for rec in recs:
        assert rec.loss >= rec.risk >= 0


def test_recording_does_not_perturb():
    data = sample_dataset(2, 2, 10, seed=1)
    cfg = RunConfig(n=7, steps=200, seed=4)
    a, ra = run_trajectory(cfg.replace(record_every=1), data)
    b, rb = run_trajectory(cfg.replace(record_every=100), data)
    assert a == b and len(ra) == 201 and len(rb) == 3


def test_records_csv_layout():
    data = sample_dataset(2, 2, 10, seed=1)
    _, recs = run_trajectory(RunConfig(n=5, steps=3, record_every=1), data)
    lines = records_csv(recs).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) == "step,time,risk,loss,kinetic,entropy_est,free_energy_est"
    assert lines[1].endswith(",,")
    _, recs = run_trajectory(RunConfig(n=5, steps=3, record_every=1, diagnostics=True), data)
    assert not records_csv(recs).splitlines()[1].endswith(",,")


def test_free_particle_velocity_variance():
    beta = 4.0
    cfg = RunConfig(n=2000, d=2, gamma=1.0, beta=beta, dt=0.01, steps=10_000, record_every=10_000,
                    regularizer=RegularizerSpec.none())
    ens, _ = run_trajectory(cfg, None)
    var = ens.r.var(axis=0)
    assert np.all(np.abs(var * beta - 1) < 0.1)


def test_exchangeability():
    data = sample_dataset(3, 2, 20, seed=9)
    cfg = RunConfig(d=3, n=9, steps=50, seed=10, beta=10.0)
    start = init_ensemble(cfg)
    perm = np.array([3, 8, 0, 1, 7, 2, 6, 5, 4])
    a, _ = run_trajectory(cfg, data, ensemble=start)
    b, _ = run_trajectory(cfg, data, ensemble=start.permuted(perm))
    # identical up to the summation order of the shared residual
    np.testing.assert_allclose(b.theta, a.theta[perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.r, a.r[perm], rtol=0, atol=1e-12)
    assert np.array_equal(b.keys, a.keys[perm])


def test_non_finite_state_aborts():
    data = sample_dataset(2, 2, 10, seed=1)
    cfg = RunConfig(n=5, dt=1e3, steps=500, integrator=Integrator.HB)
    with pytest.raises(NumericalAbort) as info, np.errstate(all="ignore"):
        run_trajectory(cfg, data)
    assert info.value.step_index < 500


def test_batch_matches_single_runs():
    data = sample_dataset(3, 2, 20, seed=11)
    cfg = RunConfig(d=3, n=12, steps=40, record_every=20, beta=50.0)
    out = run_batch(cfg, data, [3, 4])
    for seed, (ens, recs) in zip([3, 4], out):
        ref, ref_recs = run_trajectory(cfg.replace(seed=seed), data)
        np.testing.assert_allclose(ens.theta, ref.theta, rtol=0, atol=1e-13)
        assert [r.step for r in recs] == [r.step for r in ref_recs]
        assert recs[-1].loss == pytest.approx(ref_recs[-1].loss, rel=1e-12)
    assert loss(out[0][0], data) != loss(out[1][0], data)
