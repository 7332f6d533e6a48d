"""Particle-side estimators: entropy, free energy, stationary-law checks and n-sweeps.

Sign convention: :func:`knn_entropy` returns the differential entropy ``-<log rho, rho>``;
the free energy uses its negative.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .core import ActivationSpec, Dataset, Ensemble, RegularizerSpec, RunConfig
from .model import loss, regularizer_values


def knn_entropy(samples, k_neighbors: int = 3) -> float:
    """Kozachenko-Leonenko estimate of the differential entropy of ``(n, k)`` samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, dim = x.shape
    if n <= k_neighbors:
        raise ValueError(f"need more than {k_neighbors} samples")
    # sorting makes the tree, and hence every float operation, independent of input order
    x = x[np.lexsort(x.T[::-1])]
    dist, _ = cKDTree(x).query(x, k=k_neighbors + 1)
    eps = np.maximum(dist[:, -1], 1e-12)
    log_ball = 0.5 * dim * math.log(math.pi) - gammaln(0.5 * dim + 1)
    return float(digamma(n) - digamma(k_neighbors) + log_ball + dim * np.mean(np.log(eps)))


def particle_free_energy(ens: Ensemble, data: Dataset | None, act: ActivationSpec,
                         reg: RegularizerSpec, beta: float, k_neighbors: int = 3) -> float:
    """Statistical estimate of loss + mean kinetic energy - entropy / beta.

    ``data=None`` means zero risk, leaving the regularizer as the whole loss.
    """
    if data is None:
        loss_val = float(np.mean(regularizer_values(ens.theta, reg)))
    else:
        loss_val = loss(ens, data, act, reg)
    kinetic = 0.5 * float(np.mean(np.sum(ens.r**2, axis=1)))
    if math.isinf(beta):
        return loss_val + kinetic
    ent = knn_entropy(np.hstack([ens.theta, ens.r]), k_neighbors)
    return loss_val + kinetic - ent / beta


def velocity_stationarity(ens: Ensemble, beta: float) -> tuple[float, float]:
    """Norm of the mean velocity and max-abs deviation of its covariance from ``I / beta``."""
    r = np.asarray(ens.r if isinstance(ens, Ensemble) else ens)
    mean_gap = float(np.linalg.norm(r.mean(axis=0)))
    cov = r.T @ r / r.shape[0] - np.outer(r.mean(axis=0), r.mean(axis=0))
    cov_gap = float(np.max(np.abs(cov - np.eye(r.shape[1]) / beta)))
    return mean_gap, cov_gap


def velocity_mc_errors(n: int, dim: int, beta: float) -> tuple[float, float]:
    """One-sigma Monte-Carlo scale of the two gaps for exact ``N(0, I / beta)`` draws.

    Mean: ``sqrt(dim / (n beta))``. Covariance: the diagonal entry's standard error
    ``sqrt(2 / n) / beta``, which dominates the off-diagonal ``sqrt(1 / n) / beta``.
    """
    return math.sqrt(dim / (n * beta)), math.sqrt(2.0 / n) / beta


@dataclass
class Correlation:
    value: float
    degenerate: bool


def theta_r_independence(ens: Ensemble) -> Correlation:
    """Largest absolute Pearson correlation between a position and a velocity coordinate."""
    th = ens.theta - ens.theta.mean(axis=0)
    r = ens.r - ens.r.mean(axis=0)
    sd_t = np.sqrt(np.mean(th**2, axis=0))
    sd_r = np.sqrt(np.mean(r**2, axis=0))
    ok_t, ok_r = sd_t > 0, sd_r > 0
    degenerate = not (ok_t.all() and ok_r.all())
    if not (ok_t.any() and ok_r.any()):
        return Correlation(0.0, True)
    cov = th[:, ok_t].T @ r[:, ok_r] / th.shape[0]
    corr = cov / np.outer(sd_t[ok_t], sd_r[ok_r])
    return Correlation(float(np.max(np.abs(corr))), degenerate)


@dataclass
class SweepRow:
    n_small: int
    n_large: int
    sup_diff: float


@dataclass
class SweepResult:
    n_values: list
    times: np.ndarray
    mean_curves: dict  # n -> mean loss curve over seeds
    rows: list

    def to_json(self, run_id: str = "consistency") -> str:
        return json.dumps({
            "run_id": run_id,
            "n_values": self.n_values,
            "pairs": [vars(r) for r in self.rows],
        }, sort_keys=True, indent=2)


def consistency_sweep(base_cfg: RunConfig, data: Dataset, n_values: list[int],
                      seeds: list[int], threads: int = 1) -> SweepResult:
    """Mean loss curves over seeds for each width, and sup-norm differences between
    successive widths. Seeds of one width run in lockstep; widths may run on threads."""
    from concurrent.futures import ThreadPoolExecutor

    from .dynamics import run_batch

    n_values = [int(n) for n in n_values]
    if any(b < a for a, b in zip(n_values, n_values[1:])):
        raise ValueError("n_values must be nondecreasing")

    def mean_curve(n):
        runs = run_batch(base_cfg.replace(n=n), data, seeds)
        times = np.array([rec.time for rec in runs[0][1]])
        return times, np.mean([[rec.loss for rec in recs] for _, recs in runs], axis=0)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(mean_curve, n_values))
    else:
        results = [mean_curve(n) for n in n_values]
    times = results[0][0]
    curves = {n: c for n, (_, c) in zip(n_values, results)}
    rows = [SweepRow(a, b, float(np.max(np.abs(curves[a] - curves[b]))))
            for a, b in zip(n_values, n_values[1:])]
    return SweepResult(n_values, times, curves, rows)


def diagnostics_record(run_id: str, step: int, **values) -> str:
    """One JSON line keyed by run id and step."""
    return json.dumps({"run_id": run_id, "step": step, **values}, sort_keys=True)
