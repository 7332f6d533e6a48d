"""Self-consistent Gibbs densities on position grids (one or two dimensions)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from scipy.special import ndtr

from .core import ActivationSpec, ConfigError, Dataset, Ensemble, RegularizerSpec, Stream, counter_normals
from .model import GridKernels, GridSpec, potential_field


class PartitionUnderflow(FloatingPointError):
    """exp(-beta F') could not be normalized; beta or the grid is mis-scaled."""


@dataclass(frozen=True, eq=False)
class ThetaDensity:
    """Density values on the cells of a rectangular grid, normalized to unit mass."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigError("density values must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def masses(self) -> np.ndarray:
        """Flat vector of cell masses (row-major)."""
        return self.values.ravel() * self.grid.cell_volume

    @property
    def mass(self) -> float:
        return float(self.masses.sum())

    @classmethod
    def from_masses(cls, grid: GridSpec, w: np.ndarray) -> "ThetaDensity":
        return cls(grid, np.asarray(w) / grid.cell_volume)

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ThetaDensity":
        pts = grid.points()
        w = np.asarray(fn(*pts.T), dtype=float)
        return cls.from_masses(grid, w / w.sum())

    @classmethod
    def uniform(cls, grid: GridSpec) -> "ThetaDensity":
        return cls.from_masses(grid, np.full(int(np.prod(grid.shape)), 1.0 / np.prod(grid.shape)))

    @classmethod
    def gaussian(cls, grid: GridSpec, mean, var: float = 1.0) -> "ThetaDensity":
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.ndim,))
        return cls.from_function(
            grid, lambda *xs: np.exp(-sum((x - m) ** 2 for x, m in zip(xs, mean)) / (2 * var))
        )

    def l1_distance(self, other: "ThetaDensity") -> float:
        return float(np.abs(self.masses - other.masses).sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"theta{k + 1}" for k in range(self.grid.ndim)] + ["value"])
        for p, v in zip(self.grid.points(), self.values.ravel()):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
        return buf.getvalue()


def gibbs_masses(potential: np.ndarray, beta: float) -> np.ndarray:
    """Cell masses proportional to ``exp(-beta * potential)``, stabilized by the minimum."""
    logits = -beta * np.asarray(potential, dtype=float)
    logits = logits - logits.max()
    p = np.exp(logits)
    z = p.sum()
    if not np.isfinite(z) or z <= 0:
        raise PartitionUnderflow("normalizing constant is not finite and positive")
    return p / z


def apply_T(rho: ThetaDensity, kernels: GridKernels, reg: RegularizerSpec, beta: float
            ) -> ThetaDensity:
    """``exp(-beta F'(rho)) / Z`` on the grid."""
    if not beta > 0:
        raise ConfigError("beta must be positive")
    fv = kernels.first_variation(rho.masses, reg)
    return ThetaDensity.from_masses(rho.grid, gibbs_masses(fv, beta))


@dataclass
class FixedPointResult:
    density: ThetaDensity
    iterations: int
    residual: float
    converged: bool
    damping: float


def solve_fixed_point(init: ThetaDensity, kernels: GridKernels, reg: RegularizerSpec,
                      beta: float, damping: float = 0.5, tol: float = 1e-10,
                      max_iter: int = 20000) -> FixedPointResult:
    """Damped iteration ``rho <- (1 - eta) rho + eta T(rho)`` until ``|T(rho) - rho|_1 < tol``.

    ``eta`` is halved whenever the residual grows; the best iterate is returned (flagged
    non-converged) once ``max_iter`` is exhausted.
    """
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    eta = damping
    w = init.masses / init.mass
    best = (np.inf, w)
    prev = np.inf
    for it in range(max_iter + 1):
        tw = gibbs_masses(kernels.first_variation(w, reg), beta)
        res = float(np.abs(tw - w).sum())
        if res < best[0]:
            best = (res, w)
        if res < tol:
            return FixedPointResult(ThetaDensity.from_masses(init.grid, w), it, res, True, eta)
        if res > prev and eta > 1e-4:
            eta *= 0.5
        prev = res
        w = (1 - eta) * w + eta * tw
    res, w = best
    return FixedPointResult(ThetaDensity.from_masses(init.grid, w), max_iter, res, False, eta)


def f_lambda(rho: ThetaDensity, kernels: GridKernels, reg: RegularizerSpec, lam: float) -> float:
    """``1/2 U[rho, rho] + <V, rho> + 1/2 |y|^2 + lam <g, rho>``."""
    if not 0 <= lam <= 1:
        raise ConfigError("lambda must lie in [0, 1]")
    return kernels.objective(rho.masses, reg, lam)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    k = idx[u - css / idx > 0][-1]
    return np.maximum(v - css[k - 1] / k, 0.0)


def grid_infimum(kernels: GridKernels, reg: RegularizerSpec, iters: int = 200000,
                 tol: float = 1e-11) -> tuple[float, np.ndarray, float]:
    """Minimum of the convex objective over probability vectors on the cells.

    Accelerated projected gradient with function-value restarts. Returns the value, the
    minimizing masses and the Frank-Wolfe duality gap, which bounds the distance of the
    value to the true grid infimum.
    """
    lin = kernels.V + kernels.g(reg)
    n = kernels.n_cells
    if kernels.linear:
        w = np.zeros(n)
        w[np.argmin(lin)] = 1.0
        return kernels.objective(w, reg), w, 0.0
    B = kernels.basis / np.sqrt(kernels.labels.size)
    lip = float(np.linalg.norm(B, 2) ** 2)

    def grad(v):
        return B @ (B.T @ v) + lin

    w = np.full(n, 1.0 / n)
    f_w = kernels.objective(w, reg)
    z, t = w.copy(), 1.0
    gap = np.inf
    for _ in range(iters):
        w_new = project_simplex(z - grad(z) / lip)
        f_new = kernels.objective(w_new, reg)
        if f_new > f_w:
            z, t = w.copy(), 1.0
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = w_new + (t - 1) / t_new * (w_new - w)
        w, f_w, t = w_new, f_new, t_new
        gw = grad(w)
        gap = float(gw @ w - gw.min())
        if gap < tol:
            break
    return f_w, w, gap


# ---------------------------------------------------------------------------
# comparison with particles
# ---------------------------------------------------------------------------


@dataclass
class EmpiricalComparison:
    grid: GridSpec
    boltzmann_field: np.ndarray  # -beta F'(mu^n) at cell centres
    field_mass: np.ndarray  # normalized exp(boltzmann_field) per cell
    hist: np.ndarray  # particle mass per cell
    overflow: float
    l1_gap: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"theta{k + 1}" for k in range(self.grid.ndim)]
                   + ["log_density", "field_mass", "particle_mass"])
        for p, a, b, c in zip(self.grid.points(), self.boltzmann_field, self.field_mass, self.hist):
            w.writerow([repr(float(x)) for x in p] + [repr(float(a)), repr(float(b)), repr(float(c))])
        return buf.getvalue()


def histogram(theta: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, float]:
    """Particle mass per cell and the mass falling outside the grid."""
    theta = np.atleast_2d(theta)
    flat, inside = grid.cell_index(theta)
    hist = np.bincount(flat[inside], minlength=int(np.prod(grid.shape))) / theta.shape[0]
    return hist, float(1.0 - inside.mean())


def compare_empirical(ens: Ensemble, data: Dataset, act: ActivationSpec, reg: RegularizerSpec,
                      beta: float, grid: GridSpec) -> EmpiricalComparison:
    """Gibbs field of the particles' own interaction potential versus their histogram.

    Both cell-mass vectors are normalized over the grid, so ``hist`` is the histogram of
    the particles inside it; the fraction outside is reported as ``overflow``.
    ``l1_gap`` is the L1 distance between the two vectors, and 2 (the largest possible
    value) when no particle falls inside the grid.
    """
    if ens.dim != grid.ndim:
        raise ConfigError("grid dimension must equal the parameter dimension")
    pts = grid.points()
    fieldv = -beta * potential_field(ens, data, pts, act, reg)
    mass = gibbs_masses(-fieldv, 1.0)
    hist, overflow = histogram(ens.theta, grid)
    inside = hist.sum()
    if inside > 0:
        hist = hist / inside
        gap = float(np.abs(mass - hist).sum())
    else:
        gap = 2.0
    return EmpiricalComparison(grid, fieldv, mass, hist, overflow, gap)


def average_comparisons(comps: list[EmpiricalComparison]) -> EmpiricalComparison:
    """Time average of several comparisons on one grid (for example over the stationary
    tail of a run); the gap is recomputed from the averaged masses."""
    if not comps:
        raise ValueError("nothing to average")
    field_mass = np.mean([c.field_mass for c in comps], axis=0)
    hist = np.mean([c.hist for c in comps], axis=0)
    overflow = float(np.mean([c.overflow for c in comps]))
    log_field = np.log(np.maximum(field_mass, 1e-300))
    gap = float(np.abs(field_mass - hist).sum())
    return EmpiricalComparison(comps[0].grid, log_field, field_mass, hist, overflow, gap)


@dataclass
class OptimalityRow:
    beta: float
    iterations: int
    objective: float  # F_{1 - 1/beta} at the fixed point
    infimum: float
    gap: float


def optimality_gaps(init: ThetaDensity, kernels: GridKernels, reg: RegularizerSpec,
                    betas, infimum: float | None = None) -> list[OptimalityRow]:
    """For each beta, ``F_{1 - 1/beta}`` at the stationary fixed point minus the grid infimum
    of the regularized objective."""
    if infimum is None:
        infimum = grid_infimum(kernels, reg)[0]
    rows = []
    for beta in betas:
        fp = solve_fixed_point(init, kernels, reg, float(beta))
        val = f_lambda(fp.density, kernels, reg, 1.0 - 1.0 / beta)
        rows.append(OptimalityRow(float(beta), fp.iterations, val, infimum, val - infimum))
    return rows


def sample_cells(masses: np.ndarray, grid: GridSpec, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points: a cell by inverse CDF on the masses, then uniformly inside it."""
    u = ndtr(counter_normals(seed, Stream.SAMPLER, np.arange(n), 0, 1 + grid.ndim))
    cdf = np.cumsum(masses)
    cdf /= cdf[-1]
    cell = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), cdf.size - 1)
    idx = np.array(np.unravel_index(cell, grid.shape)).T
    lo = np.array(grid.mins) + idx * grid.spacings
    return lo + u[:, 1:] * grid.spacings


def run_metadata(beta: float, result: FixedPointResult, **extra) -> str:
    meta = {"beta": beta, "iterations": result.iterations, "residual": result.residual,
            "converged": result.converged, "damping": result.damping}
    meta.update(extra)
    return json.dumps(meta, sort_keys=True, indent=2)
