"""Finite-volume solver for the kinetic Fokker-Planck equation in one position and one
velocity dimension, plus the free energy and its dissipation on the grid.

Cells are uniform; values are cell averages and every integral is the midpoint rule.
Boundaries are zero-flux, so the total mass is conserved to round-off.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .core import ConfigError, RegularizerSpec
from .model import GridKernels

LOG_FLOOR = 1e-300


class CFLViolation(ValueError):
    pass


class NegativeDensity(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseGrid:
    theta_min: float = -6.0
    theta_max: float = 6.0
    r_min: float = -6.0
    r_max: float = 6.0
    n_theta: int = 128
    n_r: int = 128

    def __post_init__(self):
        if self.theta_max <= self.theta_min or self.r_max <= self.r_min:
            raise ConfigError("empty phase-space box")
        if self.n_theta < 3 or self.n_r < 3:
            raise ConfigError("need at least 3 cells per axis")

    @property
    def h_theta(self) -> float:
        return (self.theta_max - self.theta_min) / self.n_theta

    @property
    def h_r(self) -> float:
        return (self.r_max - self.r_min) / self.n_r

    @property
    def cell_area(self) -> float:
        return self.h_theta * self.h_r

    @property
    def theta(self) -> np.ndarray:
        return self.theta_min + self.h_theta * (np.arange(self.n_theta) + 0.5)

    @property
    def r(self) -> np.ndarray:
        return self.r_min + self.h_r * (np.arange(self.n_r) + 0.5)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.theta, self.r, indexing="ij")

    @classmethod
    def symmetric(cls, half_width: float = 6.0, n: int = 128) -> "PhaseGrid":
        return cls(-half_width, half_width, -half_width, half_width, n, n)


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: PhaseGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n_theta, self.grid.n_r):
            raise ConfigError("density shape does not match grid")
        object.__setattr__(self, "values", v)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)

    def theta_marginal(self) -> np.ndarray:
        """Density of the position marginal on the theta cells."""
        return self.values.sum(axis=1) * self.grid.h_r

    def r_marginal(self) -> np.ndarray:
        return self.values.sum(axis=0) * self.grid.h_theta

    def normalized(self) -> "GridDensity":
        return GridDensity(self.grid, self.values / self.mass)

    @classmethod
    def from_function(cls, grid: PhaseGrid, fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      normalize: bool = True) -> "GridDensity":
        th, r = grid.mesh()
        rho = cls(grid, fn(th, r))
        return rho.normalized() if normalize else rho

    @classmethod
    def gaussian(cls, grid: PhaseGrid, theta_mean=0.0, r_mean=0.0, theta_var=1.0, r_var=1.0):
        return cls.from_function(
            grid,
            lambda th, r: np.exp(-((th - theta_mean) ** 2) / (2 * theta_var)
                                 - (r - r_mean) ** 2 / (2 * r_var)),
        )

    @classmethod
    def gibbs(cls, grid: PhaseGrid, f_theta: np.ndarray, beta: float) -> "GridDensity":
        """Normalized ``exp(-beta (f(theta) + r^2/2))`` for per-cell potential values ``f``."""
        f = np.asarray(f_theta, dtype=float)
        logp = -beta * (f[:, None] - f.min() + 0.5 * grid.r[None, :] ** 2)
        return cls(grid, np.exp(logp)).normalized()

    def l1_distance(self, other: "GridDensity") -> float:
        return float(np.abs(self.values - other.values).sum() * self.grid.cell_area)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta", "r", "value"])
        th, r = self.grid.mesh()
        for a, b, v in zip(th.ravel(), r.ravel(), self.values.ravel()):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])
        return buf.getvalue()

    def header_json(self, **extra) -> str:
        g = self.grid
        meta = {
            "theta_min": g.theta_min, "theta_max": g.theta_max, "r_min": g.r_min,
            "r_max": g.r_max, "n_theta": g.n_theta, "n_r": g.n_r, "mass": self.mass,
        }
        meta.update(extra)
        return json.dumps(meta, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# transport step
# ---------------------------------------------------------------------------


def _bernoulli(z: np.ndarray) -> np.ndarray:
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-12
    out[nz] = z[nz] / np.expm1(z[nz])
    return out


@lru_cache(maxsize=32)
def _ou_coefficients(grid: PhaseGrid, gamma: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    # exponentially fitted flux for gamma*r*rho + (gamma/beta) d_r rho; annihilates exp(-beta r^2/2)
    r = grid.r
    z = 0.5 * beta * (r[1:] ** 2 - r[:-1] ** 2)
    scale = gamma / (beta * grid.h_r)
    return scale * _bernoulli(z), scale * _bernoulli(-z)


def _minmod_slopes(q: np.ndarray, axis: int) -> np.ndarray:
    d = np.diff(q, axis=axis)
    if axis == 0:
        a, b = d[:-1], d[1:]
    else:
        a, b = d[:, :-1], d[:, 1:]
    s = np.where(a * b > 0, np.copysign(np.minimum(np.abs(a), np.abs(b)), a), 0.0)
    pad = [(0, 0), (0, 0)]
    pad[axis] = (1, 1)
    return np.pad(s, pad)


def _limited_flux(q: np.ndarray, v: np.ndarray, axis: int) -> np.ndarray:
    s = _minmod_slopes(q, axis)
    if axis == 0:
        left, right = q[:-1] + 0.5 * s[:-1], q[1:] - 0.5 * s[1:]
    else:
        left, right = q[:, :-1] + 0.5 * s[:, :-1], q[:, 1:] - 0.5 * s[:, 1:]
    return v * np.where(v > 0, left, right)


def max_stable_dt(grid: PhaseGrid, force: np.ndarray, gamma: float, beta: float,
                  safety: float = 0.4, scheme: str = "muscl") -> float:
    """Largest step keeping every cell update a convex combination (times ``safety``)."""
    vmax = max(abs(grid.r_min), abs(grid.r_max))
    fmax = float(np.max(np.abs(force))) if np.size(force) else 0.0
    if scheme == "muscl":
        bp, bm = _ou_coefficients(grid, gamma, beta)
        ou = float(np.max(np.concatenate([bp, [0.0]]) + np.concatenate([[0.0], bm]))) / grid.h_r
        rate = 2 * vmax / grid.h_theta + 2 * fmax / grid.h_r + ou
    else:
        rate = vmax / grid.h_theta + (fmax + gamma * vmax) / grid.h_r + 2 * gamma / (beta * grid.h_r**2)
    return safety / rate


def check_cfl(grid: PhaseGrid, force: np.ndarray, gamma: float, beta: float, dt: float):
    vmax = max(abs(grid.r_min), abs(grid.r_max))
    amax = float(np.max(np.abs(force))) + gamma * vmax
    limits = [grid.h_theta / vmax, grid.h_r / amax if amax > 0 else math.inf]
    if gamma > 0:
        limits.append(grid.h_r**2 / (2 * gamma / beta))
    bound = 0.4 * min(limits)
    if dt > bound:
        raise CFLViolation(f"dt={dt:.3e} exceeds CFL bound {bound:.3e}")


def fp_step(rho: GridDensity, force: np.ndarray, gamma: float, beta: float, dt: float,
            scheme: str = "muscl", check: bool = True) -> GridDensity:
    """One explicit conservative step of the kinetic Fokker-Planck equation.

    ``force`` is ``-d_theta F'`` per theta cell. ``scheme="muscl"`` uses minmod-limited
    transport for ``r d_theta`` and ``force d_r`` and an exponentially fitted flux for the
    damping-plus-diffusion part; ``scheme="upwind"`` is first-order upwind transport with a
    centred diffusion flux.
    """
    grid = rho.grid
    force = np.asarray(force, dtype=float).reshape(-1)
    if force.shape != (grid.n_theta,):
        raise ConfigError("force must have one value per theta cell")
    if check:
        check_cfl(grid, force, gamma, beta, dt)
    q = rho.values
    r = grid.r
    if scheme == "muscl":
        f_theta = _limited_flux(q, np.broadcast_to(r[None, :], (grid.n_theta - 1, grid.n_r)), 0)
        f_r = _limited_flux(q, np.broadcast_to(force[:, None], (grid.n_theta, grid.n_r - 1)), 1)
        if gamma > 0:
            bp, bm = _ou_coefficients(grid, gamma, beta)
            f_r = f_r + bp * q[:, :-1] - bm * q[:, 1:]
    elif scheme == "upwind":
        v = r[None, :]
        f_theta = np.where(v > 0, v * q[:-1], v * q[1:])
        r_face = 0.5 * (r[:-1] + r[1:])
        acc = force[:, None] - gamma * r_face[None, :]
        f_r = np.where(acc > 0, acc * q[:, :-1], acc * q[:, 1:])
        if gamma > 0:
            f_r = f_r - (gamma / beta) * (q[:, 1:] - q[:, :-1]) / grid.h_r
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    out = q.copy()
    ct, cr = dt / grid.h_theta, dt / grid.h_r
    out[:-1] -= ct * f_theta
    out[1:] += ct * f_theta
    out[:, :-1] -= cr * f_r
    out[:, 1:] += cr * f_r
    low = out.min()
    if low < -1e-12:
        raise NegativeDensity(f"density reached {low:.3e}; step size too large")
    return GridDensity(grid, out)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


def theta_kernels(grid: PhaseGrid, kernels: GridKernels):
    if kernels.n_cells != grid.n_theta:
        raise ConfigError("kernels must live on the theta cells of the phase grid")


def first_variation(rho: GridDensity, kernels: GridKernels,
                    reg: RegularizerSpec = RegularizerSpec()) -> np.ndarray:
    """``U[rho^theta] + V + g`` per theta cell."""
    theta_kernels(rho.grid, kernels)
    w = rho.theta_marginal() * rho.grid.h_theta
    return kernels.first_variation(w, reg)


def nonlinear_force(rho: GridDensity, kernels: GridKernels,
                    reg: RegularizerSpec = RegularizerSpec()) -> np.ndarray:
    """``-d_theta (U[rho^theta] + V + g)`` by centred differences (one-sided at the ends)."""
    return -np.gradient(first_variation(rho, kernels, reg), rho.grid.h_theta, edge_order=2)


def linear_force(grid: PhaseGrid, df: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    return -df(grid.theta)


def _neg_entropy(values: np.ndarray) -> np.ndarray:
    safe = np.where(values > LOG_FLOOR, values, 1.0)
    return np.where(values > LOG_FLOOR, values * np.log(safe), 0.0)


def grid_free_energy(rho: GridDensity, potential, beta: float) -> float:
    """Loss of the position marginal + mean kinetic energy + (negative entropy) / beta.

    ``potential`` is either per-theta-cell values ``f`` (loss ``<f, rho^theta>``) or a
    callable mapping theta-cell masses to the loss.
    """
    g = rho.grid
    w = rho.theta_marginal() * g.h_theta
    if callable(potential):
        loss_val = float(potential(w))
    else:
        loss_val = float(np.asarray(potential, dtype=float) @ w)
    kinetic = float((rho.values * (0.5 * g.r[None, :] ** 2)).sum() * g.cell_area)
    entropy = float(_neg_entropy(rho.values).sum() * g.cell_area)
    return loss_val + kinetic + entropy / beta


def kernel_potential(kernels: GridKernels, reg: RegularizerSpec = RegularizerSpec()):
    """Loss callable ``w -> F`` for :func:`grid_free_energy` built from grid kernels."""
    return lambda w: kernels.objective(w, reg)


def grid_dissipation(rho: GridDensity, beta: float, gamma: float) -> float:
    """``gamma * int |r + d_r log(rho) / beta|^2 rho`` over interior velocity cells."""
    g = rho.grid
    q = rho.values
    logq = np.log(np.maximum(q, LOG_FLOOR))
    dlog = (logq[:, 2:] - logq[:, :-2]) / (2 * g.h_r)
    inner = q[:, 1:-1]
    mask = (inner > LOG_FLOOR) & (q[:, 2:] > LOG_FLOOR) & (q[:, :-2] > LOG_FLOOR)
    integrand = np.where(mask, (g.r[None, 1:-1] + dlog / beta) ** 2 * inner, 0.0)
    return gamma * float(integrand.sum() * g.cell_area)


def gaussian_r_marginal(grid: PhaseGrid, beta: float) -> np.ndarray:
    p = np.exp(-0.5 * beta * grid.r**2)
    return p / (p.sum() * grid.h_r)


def check_product_form(rho: GridDensity, beta: float, min_mass: float = 1e-4
                       ) -> tuple[float, float]:
    """Distance of the velocity marginal to the Gaussian, and of each conditional ``rho(r | theta)``
    to the velocity marginal (maximum over theta cells holding at least ``min_mass`` of
    the position mass, a floor that keeps round-off tails out of the maximum)."""
    g = rho.grid
    r_marg = rho.r_marginal()
    gap_r = float(np.abs(r_marg - gaussian_r_marginal(g, beta)).sum() * g.h_r)
    th_marg = rho.theta_marginal()
    keep = th_marg * g.h_theta >= min_mass * rho.mass
    cond = rho.values[keep] / th_marg[keep, None]
    gaps = np.abs(cond - r_marg[None, :] / (r_marg.sum() * g.h_r)).sum(axis=1) * g.h_r
    return gap_r, float(gaps.max()) if gaps.size else 0.0


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------


@dataclass
class KineticHistory:
    time: list = field(default_factory=list)
    free_energy: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)
    l1_to_reference: list = field(default_factory=list)


def evolve(rho: GridDensity, force_fn: Callable[[GridDensity], np.ndarray], gamma: float,
           beta: float, t_end: float, dt: float | None = None, potential=None,
           reference: GridDensity | None = None, record_every: int = 100,
           scheme: str = "muscl", force_bound: float | None = None
           ) -> tuple[GridDensity, KineticHistory]:
    """Integrate up to ``t_end``; records the free energy (when ``potential`` is given), the
    dissipation and the L1 distance to ``reference`` every ``record_every`` steps.

    ``force_fn`` is re-evaluated every step. When ``dt`` is None it is chosen from the
    initial force; ``force_bound`` caps the force magnitude used for that choice.
    """
    f0 = force_fn(rho)
    if dt is None:
        fb = float(np.max(np.abs(f0))) if force_bound is None else force_bound
        dt = max_stable_dt(rho.grid, np.array([fb]), gamma, beta, scheme=scheme)
    steps = int(math.ceil(t_end / dt - 1e-9))
    hist = KineticHistory()

    def record(t, state):
        hist.time.append(t)
        if potential is not None:
            hist.free_energy.append(grid_free_energy(state, potential, beta))
        hist.dissipation.append(grid_dissipation(state, beta, gamma))
        if reference is not None:
            hist.l1_to_reference.append(state.l1_distance(reference))

    record(0.0, rho)
    force = f0
    for k in range(steps):
        rho = fp_step(rho, force, gamma, beta, dt, scheme=scheme)
        if (k + 1) % record_every == 0 or k + 1 == steps:
            record((k + 1) * dt, rho)
        if k + 1 < steps:
            force = force_fn(rho)
    return rho, hist
