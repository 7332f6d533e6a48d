"""Explicit time integrators for the particle system and the trajectory runner."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from typing import Callable

import numpy as np

from .core import Dataset, Ensemble, Integrator, KeyedNormals, RunConfig, Stream, init_ensemble
from .model import (batched_interaction_gradient, interaction_gradient, regularizer_grads,
                    regularizer_values, residuals)


class NumericalAbort(RuntimeError):
    """The state became non-finite; usually the step size is too large."""

    def __init__(self, step_index: int, detail: str = ""):
        self.step_index = step_index
        msg = f"non-finite particle state at step {step_index}; reduce dt"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    time: float
    risk: float
    loss: float
    kinetic: float
    entropy_est: float | None = None
    free_energy_est: float | None = None


CSV_COLUMNS = [f.name for f in fields(TrajectoryRecord)]


def records_csv(records: list[TrajectoryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        w.writerow(["" if v is None else repr(v) for v in astuple(rec)])
    return buf.getvalue()


def damping(cfg: RunConfig, t: float) -> float:
    """Damping coefficient at time ``t``: constant except for AGD, where it is ``gamma / max(t, t_floor)``."""
    if cfg.integrator is Integrator.AGD:
        return cfg.gamma / max(t, cfg.t_floor)
    return cfg.gamma


def _kick(theta, r, grad, t, step_index, cfg: RunConfig, noise_fn):
    dt = cfg.dt
    if cfg.integrator is Integrator.GF:
        theta_new, r_new = theta - grad * dt, np.zeros_like(r)
    else:
        gam = damping(cfg, t)
        theta_new = theta + r * dt
        r_new = r + (-grad - gam * r) * dt
        if cfg.integrator is Integrator.SHB:
            r_new = r_new + math.sqrt(2.0 * gam * dt / cfg.beta) * noise_fn()
    if not (np.all(np.isfinite(theta_new)) and np.all(np.isfinite(r_new))):
        raise NumericalAbort(step_index)
    return theta_new, r_new


def _advance(theta, r, t, step_index, data, cfg: RunConfig, normals: KeyedNormals, threads=1,
             noise=None):
    if data is None:
        grad = regularizer_grads(theta, cfg.regularizer)
    else:
        grad = interaction_gradient(theta, data, cfg.act, cfg.regularizer, threads=threads)

    def draw():
        if noise is not None:
            return noise
        return normals(cfg.seed, Stream.DYNAMICS, step_index, theta.shape[1])

    return _kick(theta, r, grad, t, step_index, cfg, draw)


def _step(ens: Ensemble, data: Dataset, cfg: RunConfig, step_index: int, want: Integrator,
          threads: int = 1, noise=None) -> Ensemble:
    if cfg.integrator is not want:
        cfg = cfg.replace(integrator=want)
    theta, r = _advance(ens.theta, ens.r, ens.time, step_index, data, cfg, KeyedNormals(ens.keys),
                        threads, noise)
    return ens.with_state(theta, r, ens.time + cfg.dt)


def shb_step(ens: Ensemble, data: Dataset, cfg: RunConfig, step_index: int,
             threads: int = 1, noise: np.ndarray | None = None) -> Ensemble:
    """Euler-Maruyama step of the stochastic heavy ball SDE.

    ``noise`` overrides the keyed Gaussian draw (shape ``(n, d)``); otherwise it comes from
    each particle's stream at ``step_index``.
    """
    return _step(ens, data, cfg, step_index, Integrator.SHB, threads, noise)


def hb_step(ens: Ensemble, data: Dataset, cfg: RunConfig, step_index: int,
            threads: int = 1) -> Ensemble:
    return _step(ens, data, cfg, step_index, Integrator.HB, threads)


def agd_step(ens: Ensemble, data: Dataset, cfg: RunConfig, step_index: int,
             threads: int = 1) -> Ensemble:
    """Heavy ball step with damping ``gamma / max(t, t_floor)`` (continuous-time Nesterov)."""
    return _step(ens, data, cfg, step_index, Integrator.AGD, threads)


def gf_step(ens: Ensemble, data: Dataset, cfg: RunConfig, step_index: int,
            threads: int = 1) -> Ensemble:
    return _step(ens, data, cfg, step_index, Integrator.GF, threads)


STEPPERS = {
    Integrator.SHB: shb_step,
    Integrator.HB: hb_step,
    Integrator.AGD: agd_step,
    Integrator.GF: gf_step,
}


def make_record(step: int, ens: Ensemble, data: Dataset, cfg: RunConfig) -> TrajectoryRecord:
    theta, r = ens.theta, ens.r
    risk_val = 0.0 if data is None else 0.5 * float(np.mean(residuals(theta, data, cfg.act) ** 2))
    loss_val = risk_val + float(np.mean(regularizer_values(theta, cfg.regularizer)))
    kinetic = 0.5 * float(np.mean(np.sum(r**2, axis=1)))
    ent = fe = None
    if cfg.diagnostics:
        from .diagnostics import knn_entropy

        if ens.n > 3:
            ent = knn_entropy(np.hstack([theta, r]))
            fe = loss_val + kinetic - ent / cfg.beta
    return TrajectoryRecord(step, ens.time, risk_val, loss_val, kinetic, ent, fe)


def run_trajectory(cfg: RunConfig, data: Dataset, ensemble: Ensemble | None = None,
                   threads: int = 1,
                   callback: Callable[[int, Ensemble], None] | None = None,
                   ) -> tuple[Ensemble, list[TrajectoryRecord]]:
    """Apply ``cfg.steps`` integrator steps, recording every ``cfg.record_every`` steps.

    ``data=None`` drops the data term, leaving the regularizer as the only potential.

    The initial state (step 0) and the final state are always recorded. ``callback`` is
    called with ``(step, ensemble)`` at the same points.
    """
    ens = init_ensemble(cfg) if ensemble is None else ensemble
    records = [make_record(0, ens, data, cfg)]
    if callback is not None:
        callback(0, ens)
    theta, r, t0, keys = ens.theta, ens.r, ens.time, ens.keys
    t = t0
    normals = KeyedNormals(keys)
    for k in range(cfg.steps):
        theta, r = _advance(theta, r, t, k, data, cfg, normals, threads)
        step = k + 1
        t = t0 + step * cfg.dt
        if step % cfg.record_every == 0 or step == cfg.steps:
            ens = Ensemble(theta, r, t, keys)
            records.append(make_record(step, ens, data, cfg))
            if callback is not None:
                callback(step, ens)
    return Ensemble(theta, r, t, keys), records


def run_batch(cfg: RunConfig, data: Dataset, seeds) -> list[tuple[Ensemble, list[TrajectoryRecord]]]:
    """Run one trajectory per seed in lockstep, sharing the matrix products across seeds.

    Each seed keeps its own initial ensemble and noise stream, so the result for a seed
    matches :func:`run_trajectory` up to floating-point reassociation in the products.
    """
    seeds = [int(s) for s in seeds]
    cfgs = [cfg.replace(seed=s) for s in seeds]
    starts = [init_ensemble(c) for c in cfgs]
    keys = starts[0].keys
    theta = np.stack([e.theta for e in starts])
    r = np.stack([e.r for e in starts])
    records = [[make_record(0, e, data, c)] for e, c in zip(starts, cfgs)]
    t = 0.0
    normals = KeyedNormals(keys)
    noise_buf = np.empty_like(theta)
    for k in range(cfg.steps):
        grad = batched_interaction_gradient(theta, data, cfg.act, cfg.regularizer)

        def draw(k=k):
            for i, s in enumerate(seeds):
                normals(s, Stream.DYNAMICS, k, cfg.d, out=noise_buf[i])
            return noise_buf

        theta, r = _kick(theta, r, grad, t, k, cfg, draw)
        step = k + 1
        t = step * cfg.dt
        if step % cfg.record_every == 0 or step == cfg.steps:
            for i, c in enumerate(cfgs):
                records[i].append(make_record(step, Ensemble(theta[i], r[i], t, keys), data, c))
    return [(Ensemble(theta[i], r[i], t, keys), records[i]) for i in range(len(seeds))]
