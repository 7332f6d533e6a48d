"""Named desk-scale experiments. Each writes plot-ready files into an output directory
and returns a JSON-serializable summary, which is also written to ``meta.json``.

Every preset is a pure function of its parameters: no timestamps or wall-clock values
are written, so reruns produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .boltzmann import (ThetaDensity, average_comparisons, compare_empirical, grid_infimum,
                        optimality_gaps, solve_fixed_point)
from .core import (ConfigError, Dataset, Integrator, RegularizerSpec, RunConfig, TeacherSpec,
                   dataset_from_teacher, sample_dataset)
from .diagnostics import (consistency_sweep, theta_r_independence, velocity_mc_errors,
                          velocity_stationarity)
from .dynamics import records_csv, run_batch, run_trajectory
from .kinetic_pde import (GridDensity, PhaseGrid, check_product_form, evolve, kernel_potential,
                          linear_force, nonlinear_force)
from .model import GridKernels, GridSpec, field_csv, potential_field


# ---------------------------------------------------------------------------
# shared desk problems
# ---------------------------------------------------------------------------


def desk_dataset_2d(seed: int = 1, m: int = 50) -> Dataset:
    """Two-dimensional parameters ``(a, b)``, twenty-neuron teacher."""
    return sample_dataset(2, 20, m, seed)


def _fix_output_weight(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float).reshape(-1, 1)
    return np.hstack([c, np.ones_like(c)])


@dataclass(frozen=True)
class OneDimProblem:
    """Neurons ``s(a x)`` with the output weight pinned to one; only ``a`` varies."""

    data: Dataset
    grid: GridSpec
    kernels: GridKernels
    reg: RegularizerSpec


def desk_problem_1d(n_cells: int = 128, half_width: float = 6.0, c: float = 0.2) -> OneDimProblem:
    teacher = TeacherSpec(np.array([[2.0, 1.0]]))
    data = dataset_from_teacher(teacher, 200, 11)
    grid = GridSpec((-half_width,), (half_width,), (n_cells,))
    kernels = GridKernels.from_dataset(data, grid.points()[:, 0], embed=_fix_output_weight)
    return OneDimProblem(data, grid, kernels, RegularizerSpec.quadratic(c))


@dataclass(frozen=True)
class TwoDimProblem:
    data: Dataset
    grid: GridSpec
    kernels: GridKernels
    reg: RegularizerSpec


def desk_problem_2d(n_cells: int = 32, half_width: float = 4.0, c: float = 0.2) -> TwoDimProblem:
    data = desk_dataset_2d()
    grid = GridSpec((-half_width, -half_width), (half_width, half_width), (n_cells, n_cells))
    kernels = GridKernels.from_dataset(data, grid.points())
    return TwoDimProblem(data, grid, kernels, RegularizerSpec.quadratic(c))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _write(out: Path, name: str, text: str):
    (out / name).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def marginals_csv(ens) -> str:
    d = ens.dim
    header = [f"theta{k + 1}" for k in range(d)] + [f"r{k + 1}" for k in range(d)]
    return _csv(header, (list(t) + list(v) for t, v in zip(ens.theta, ens.r)))


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def velocity_check(ens, beta: float, factor: float = 4.0) -> dict:
    """Velocity gaps against ``factor`` Monte-Carlo standard errors, plus the independence test."""
    mean_gap, cov_gap = velocity_stationarity(ens, beta)
    mc_mean, mc_cov = velocity_mc_errors(ens.n, ens.dim, beta)
    corr = theta_r_independence(ens)
    return {
        "mean_gap": mean_gap, "mean_mc_error": mc_mean,
        "cov_gap": cov_gap, "cov_mc_error": mc_cov,
        "velocity_ok": bool(mean_gap <= factor * mc_mean and cov_gap <= factor * mc_cov),
        "theta_r_correlation": corr.value,
        "independence_bound": 5.0 / math.sqrt(ens.n),
        "independence_ok": bool(corr.value < 5.0 / math.sqrt(ens.n)),
    }


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

WIDTH_SWEEP = dict(d=20, n0=10, m=32, dt=0.05, gamma=1.0, steps=20000, seeds=20,
                   n_values=[10, 25, 50, 100, 200])
WIDTH_METHODS = [("SHB_beta1e2", Integrator.SHB, 1e2), ("SHB_beta1e4", Integrator.SHB, 1e4),
                 ("HB", Integrator.HB, 1e2), ("AGD", Integrator.AGD, 1e2)]


def width_sweep(out: Path, seed: int = 0, threads: int = 1, methods=None, **params) -> dict:
    """Final loss against width for each integrator, averaged over seeds."""
    p = {**WIDTH_SWEEP, **params}
    methods = WIDTH_METHODS if methods is None else [m for m in WIDTH_METHODS if m[0] in methods]
    data = sample_dataset(p["d"], p["n0"], p["m"], seed)
    run_seeds = [seed + 1 + k for k in range(p["seeds"])]
    cells = [(name, integ, beta, n) for name, integ, beta in methods for n in p["n_values"]]

    def run_cell(cell):
        name, integ, beta, n = cell
        cfg = RunConfig(d=p["d"], n=n, n0=p["n0"], m=p["m"], gamma=p["gamma"], beta=beta,
                        dt=p["dt"], steps=p["steps"], record_every=max(p["steps"], 1),
                        integrator=integ, regularizer=RegularizerSpec.none())
        return [(name, beta, n, s, recs[0].loss, recs[-1].loss)
                for s, (_, recs) in zip(run_seeds, run_batch(cfg, data, run_seeds))]

    rows = [row for block in _pmap(run_cell, cells, threads) for row in block]
    _write(out, "width_sweep.csv",
           _csv(["method", "beta", "n", "seed", "initial_loss", "final_loss"], rows))
    summary = {}
    for name, _, _ in methods:
        summary[name] = {
            str(n): {
                "mean_initial_loss": float(np.mean([r[4] for r in rows if r[0] == name and r[2] == n])),
                "mean_final_loss": float(np.mean([r[5] for r in rows if r[0] == name and r[2] == n])),
            }
            for n in p["n_values"]
        }
    _write(out, "width_summary.csv", _csv(
        ["method", "n", "mean_initial_loss", "mean_final_loss"],
        ([name, int(n), v["mean_initial_loss"], v["mean_final_loss"]]
         for name, per_n in summary.items() for n, v in per_n.items())))
    return {"params": p, "methods": [m[0] for m in methods], "run_seeds": run_seeds,
            "summary": summary}


STATIONARY = dict(n=200, m=50, beta=100.0, dt=0.02, steps=50000, record_every=500,
                  grid_half_width=4.0, grid_cells=8, average_from=0.5)


def stationary_marginals(out: Path, seed: int = 0, threads: int = 1, **params) -> dict:
    """Particle positions against the Gibbs field of their own interaction potential.

    The comparison is averaged over the recorded snapshots in the final
    ``1 - average_from`` fraction of the run; the last snapshot is reported as well.
    """
    p = {**STATIONARY, **params}
    data = desk_dataset_2d(m=p["m"])
    cfg = RunConfig(d=2, n=p["n"], n0=20, m=p["m"], beta=p["beta"], dt=p["dt"],
                    steps=p["steps"], seed=seed, record_every=p["record_every"],
                    regularizer=RegularizerSpec.smoothed_norm(0.01, 1e-3))
    hw, nc = p["grid_half_width"], p["grid_cells"]
    grid = GridSpec((-hw, -hw), (hw, hw), (nc, nc))
    start = p["average_from"] * p["steps"]
    comps = []

    def collect(step, ens):
        if step >= start and step > 0:
            comps.append(compare_empirical(ens, data, cfg.act, cfg.regularizer, cfg.beta, grid))

    ens, recs = run_trajectory(cfg, data, threads=threads, callback=collect)
    final = compare_empirical(ens, data, cfg.act, cfg.regularizer, cfg.beta, grid)
    avg = average_comparisons(comps) if comps else final
    _write(out, "trajectory.csv", records_csv(recs))
    _write(out, "marginals.csv", marginals_csv(ens))
    _write(out, "field.csv", avg.to_csv())
    _write(out, "field_final.csv", final.to_csv())
    return {
        "params": p, "config": cfg.to_dict(),
        "snapshots_averaged": len(comps),
        "l1_gap": avg.l1_gap, "l1_gap_final": final.l1_gap, "overflow": avg.overflow,
        "field_argmax_cell": int(np.argmax(avg.field_mass)),
        "histogram_argmax_cell": int(np.argmax(avg.hist)),
        "final_field_argmax_cell": int(np.argmax(final.field_mass)),
        "final_histogram_argmax_cell": int(np.argmax(final.hist)),
        "velocity": velocity_check(ens, cfg.beta),
        "final_loss": recs[-1].loss,
    }


POTENTIAL = dict(n=200, m=50, beta=100.0, dt=0.02, snapshots=[10, 100, 1000, 10000],
                 grid_half_width=4.0, grid_cells=64)


def potential_evolution(out: Path, seed: int = 0, threads: int = 1, **params) -> dict:
    """Interaction potential on a grid at a few steps of one noisy run."""
    p = {**POTENTIAL, **params}
    snaps = sorted(int(s) for s in p["snapshots"])
    data = desk_dataset_2d(m=p["m"])
    cfg = RunConfig(d=2, n=p["n"], n0=20, m=p["m"], beta=p["beta"], dt=p["dt"],
                    steps=snaps[-1], seed=seed, record_every=1,
                    regularizer=RegularizerSpec.smoothed_norm(0.01, 1e-3))
    hw, nc = p["grid_half_width"], p["grid_cells"]
    grid = GridSpec((-hw, -hw), (hw, hw), (nc, nc))
    pts = grid.points()
    ranges = {}

    def snapshot(step, ens):
        if step in snaps:
            vals = potential_field(ens, data, pts, cfg.act, cfg.regularizer)
            _write(out, f"potential_step{step}.csv", field_csv(grid, vals))
            _write(out, f"particles_step{step}.csv", marginals_csv(ens))
            ranges[str(step)] = {"min": float(vals.min()), "max": float(vals.max())}

    _, recs = run_trajectory(cfg, data, threads=threads, callback=snapshot)
    _write(out, "trajectory.csv", records_csv([r for r in recs if r.step in snaps or r.step == 0]))
    return {"params": p, "config": cfg.to_dict(), "potential_range": ranges}


LINEAR_FP = dict(n_cells=128, half_width=6.0, gamma=1.0, beta=1.0, t_end=20.0,
                 init_mean=2.0, init_var=0.5, record_every=50)


def linear_fp(out: Path, seed: int = 0, threads: int = 1, **params) -> dict:
    """Kinetic equation with potential ``theta^2 / 2`` relaxing to its Gibbs law."""
    p = {**LINEAR_FP, **params}
    grid = PhaseGrid.symmetric(p["half_width"], int(p["n_cells"]))
    f = 0.5 * grid.theta**2
    force = linear_force(grid, lambda th: th)
    gibbs = GridDensity.gibbs(grid, f, p["beta"])
    rho0 = GridDensity.gaussian(grid, p["init_mean"], 0.0, p["init_var"], p["init_var"])
    rho, hist = evolve(rho0, lambda _: force, p["gamma"], p["beta"], p["t_end"], potential=f,
                       reference=gibbs, record_every=int(p["record_every"]))
    _write(out, "history.csv", _csv(
        ["time", "free_energy", "dissipation", "l1_to_gibbs"],
        zip(hist.time, hist.free_energy, hist.dissipation, hist.l1_to_reference)))
    _write(out, "density.csv", rho.to_csv())
    _write(out, "density_header.json", rho.header_json(time=hist.time[-1]))
    r_gap, ind_gap = check_product_form(rho, p["beta"])
    return {
        "params": p,
        "final_l1": hist.l1_to_reference[-1],
        "max_free_energy_increase": float(np.max(np.diff(hist.free_energy))),
        "r_marginal_gap": r_gap, "independence_gap": ind_gap,
        "mass_error": abs(rho.mass - 1.0),
    }


BOLTZMANN = dict(beta=4.0, betas=[4.0, 16.0, 64.0, 256.0], sweep_cells=256)


def boltzmann_fixed_point(out: Path, seed: int = 0, threads: int = 1, **params) -> dict:
    """Fixed points from several starts on the 1-d and 2-d desk problems, and the
    optimality gap against inverse temperature."""
    p = {**BOLTZMANN, **params}
    beta = p["beta"]
    result: dict[str, Any] = {"params": p}
    for label, prob, inits in (
        ("1d", desk_problem_1d(), lambda g: [ThetaDensity.uniform(g), ThetaDensity.gaussian(g, 3.0, 0.5),
                                             ThetaDensity.gaussian(g, -3.0, 1.0)]),
        ("2d", desk_problem_2d(), lambda g: [ThetaDensity.uniform(g), ThetaDensity.gaussian(g, (2.0, -2.0), 0.5),
                                             ThetaDensity.gaussian(g, (-2.0, 1.0), 1.0)]),
    ):
        fps = [solve_fixed_point(i, prob.kernels, prob.reg, beta) for i in inits(prob.grid)]
        spread = max(a.density.l1_distance(b.density) for a in fps for b in fps)
        _write(out, f"fixed_point_{label}.csv", fps[0].density.to_csv())
        result[label] = {"iterations": [f.iterations for f in fps],
                         "residuals": [f.residual for f in fps],
                         "converged": [f.converged for f in fps], "max_pairwise_l1": spread}
    prob = desk_problem_1d(n_cells=int(p["sweep_cells"]))
    inf_val, _, fw_gap = grid_infimum(prob.kernels, prob.reg)
    rows = optimality_gaps(ThetaDensity.uniform(prob.grid), prob.kernels, prob.reg, p["betas"], inf_val)
    _write(out, "beta_sweep.csv", _csv(["beta", "iterations", "objective", "infimum", "gap"],
                                       ([r.beta, r.iterations, r.objective, r.infimum, r.gap] for r in rows)))
    result["beta_sweep"] = {"infimum": inf_val, "duality_gap": fw_gap,
                            "gaps": [r.gap for r in rows]}
    return result


CONSISTENCY = dict(d=20, n0=10, m=32, beta=100.0, dt=0.05, steps=4000, record_every=100,
                   n_values=[25, 50, 100, 200, 400], seeds=10)


def consistency(out: Path, seed: int = 0, threads: int = 1, **params) -> dict:
    """Mean noisy-training loss curves for growing widths."""
    p = {**CONSISTENCY, **params}
    data = sample_dataset(p["d"], p["n0"], p["m"], seed)
    base = RunConfig(d=p["d"], n=p["n_values"][0], n0=p["n0"], m=p["m"], beta=p["beta"],
                     dt=p["dt"], steps=p["steps"], record_every=p["record_every"],
                     regularizer=RegularizerSpec.none())
    sweep = consistency_sweep(base, data, p["n_values"], [seed + 1 + k for k in range(p["seeds"])],
                              threads=threads)
    _write(out, "consistency.json", sweep.to_json() + "\n")
    _write(out, "curves.csv", _csv(["time"] + [f"n{n}" for n in sweep.n_values],
                                   ([t] + [sweep.mean_curves[n][i] for n in sweep.n_values]
                                    for i, t in enumerate(sweep.times))))
    return {"params": p, "pairs": [vars(r) for r in sweep.rows]}


PRESETS: dict[str, tuple[Callable[..., dict], str]] = {
    "width_sweep": (width_sweep, "final loss vs width for noisy/plain/accelerated momentum"),
    "stationary_marginals": (stationary_marginals, "particle histogram vs Gibbs field, d=2, n=200"),
    "potential_evolution": (potential_evolution, "interaction potential snapshots on a grid"),
    "linear_fp": (linear_fp, "kinetic equation relaxing to the Gibbs product (quadratic potential)"),
    "boltzmann_fixed_point": (boltzmann_fixed_point, "self-consistent fixed points and beta sweep"),
    "consistency": (consistency, "mean loss curves for growing widths"),
}

PRESET_DEFAULTS = {
    "width_sweep": WIDTH_SWEEP, "stationary_marginals": STATIONARY, "potential_evolution": POTENTIAL,
    "linear_fp": LINEAR_FP, "boltzmann_fixed_point": BOLTZMANN, "consistency": CONSISTENCY,
}


def run_preset(name: str, out: Path, seed: int = 0, threads: int = 1,
               overrides: dict | None = None) -> dict:
    """Run a preset, write ``meta.json`` and return the summary."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(PRESET_DEFAULTS[name])
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {sorted(unknown)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fn, _ = PRESETS[name]
    summary = fn(out, seed=seed, threads=threads, **overrides)
    meta = {"preset": name, "seed": seed, "overrides": overrides,
            "code_version": __version__, **summary}
    _write(out, "meta.json", _dump(meta))
    return meta
