"""Two-layer network, quadratic risk and the mean-field interaction potential."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    SIGMOID,
    ActivationSpec,
    ActKind,
    ConfigError,
    Dataset,
    Ensemble,
    ParamPoint,
    RegKind,
    RegularizerSpec,
)

__all__ = [
    "ActivationSpec",
    "ActKind",
    "RegularizerSpec",
    "GridSpec",
    "GridKernels",
    "basis_eval",
    "network_output",
    "risk",
    "loss",
    "regularizer_value_grad",
    "regularizer_values",
    "regularizer_grads",
    "interaction_gradient",
    "potential_field",
    "uv_kernels",
]


def _as_matrix(thetas) -> np.ndarray:
    if isinstance(thetas, Ensemble):
        return np.asarray(thetas.theta)
    if isinstance(thetas, ParamPoint):
        return thetas.to_vector()[None, :]
    if len(thetas) and isinstance(thetas[0], ParamPoint):
        return np.stack([t.to_vector() for t in thetas])
    return np.atleast_2d(np.asarray(thetas, dtype=np.float64))


def _check_dim(theta: np.ndarray, x: np.ndarray):
    if theta.shape[-1] != x.shape[-1] + 1:
        raise ConfigError(
            f"dimension mismatch: theta has d={theta.shape[-1]}, features have {x.shape[-1]}"
        )


def basis_matrix(theta: np.ndarray, x: np.ndarray, act: ActivationSpec = SIGMOID) -> np.ndarray:
    """``Psi[i, j] = b_i s(<a_i, x_j>)`` for ``(n, d)`` parameters and ``(m, d-1)`` features."""
    theta = np.atleast_2d(theta)
    x = np.atleast_2d(x)
    _check_dim(theta, x)
    return theta[:, -1:] * act(theta[:, :-1] @ x.T)


def basis_eval(theta: ParamPoint, x, act: ActivationSpec = SIGMOID) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size != theta.a.size:
        raise ConfigError("feature dimension must be d-1")
    return theta.b * float(act(np.dot(theta.a, x)))


def network_output(thetas, x, act: ActivationSpec = SIGMOID):
    """Mean of the neurons' outputs at one feature vector (scalar) or a batch ``(m, d-1)``."""
    theta = _as_matrix(thetas)
    if theta.shape[0] == 0:
        raise ConfigError("network needs at least one neuron")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = basis_matrix(theta, np.atleast_2d(x), act).mean(axis=0)
    return float(out[0]) if single else out


def residuals(ensemble, data: Dataset, act: ActivationSpec = SIGMOID) -> np.ndarray:
    return network_output(ensemble, data.features, act) - data.labels


def risk(ensemble, data: Dataset, act: ActivationSpec = SIGMOID) -> float:
    """Half mean squared error over the dataset."""
    res = residuals(ensemble, data, act)
    return 0.5 * float(np.mean(res**2))


def regularizer_values(theta: np.ndarray, reg: RegularizerSpec) -> np.ndarray:
    theta = np.atleast_2d(theta)
    sq = np.sum(theta**2, axis=1)
    if reg.kind is RegKind.SMOOTHED_NORM:
        return reg.c * np.sqrt(sq + reg.eps**2)
    if reg.kind is RegKind.QUADRATIC:
        return 0.5 * reg.c * sq
    return np.zeros(theta.shape[0])


def regularizer_grads(theta: np.ndarray, reg: RegularizerSpec) -> np.ndarray:
    theta = np.atleast_2d(theta)
    if reg.kind is RegKind.SMOOTHED_NORM:
        norm = np.sqrt(np.sum(theta**2, axis=1) + reg.eps**2)
        return reg.c * theta / norm[:, None]
    if reg.kind is RegKind.QUADRATIC:
        return reg.c * theta
    return np.zeros_like(theta)


def regularizer_value_grad(theta, reg: RegularizerSpec) -> tuple[float, np.ndarray]:
    v = theta.to_vector() if isinstance(theta, ParamPoint) else np.asarray(theta, dtype=float)
    return float(regularizer_values(v, reg)[0]), regularizer_grads(v, reg)[0]


def loss(ensemble, data: Dataset, act: ActivationSpec = SIGMOID,
         reg: RegularizerSpec = RegularizerSpec()) -> float:
    """Regularized objective ``F`` at the empirical measure: risk plus mean regularizer."""
    theta = _as_matrix(ensemble)
    return risk(theta, data, act) + float(np.mean(regularizer_values(theta, reg)))


PARTICLE_BLOCK = 64


def _gradient_block(theta, x, res, act, reg, s=None):
    if s is None:
        s = act(theta[:, :-1] @ x.T)
    m = x.shape[0]
    grad = np.empty_like(theta)
    grad[:, -1] = s @ res / m
    grad[:, :-1] = theta[:, -1:] * ((act.deriv_from_value(s) * res) @ x) / m
    return grad + regularizer_grads(theta, reg)


def forward(theta: np.ndarray, data: Dataset, act: ActivationSpec = SIGMOID
            ) -> tuple[np.ndarray, np.ndarray]:
    """Shared pass over the data: activations ``s(<a_i, x_j>)`` and the residual vector."""
    _check_dim(theta, data.features)
    s = act(theta[:, :-1] @ data.features.T)
    res = (theta[:, -1:] * s).mean(axis=0) - data.labels
    return s, res


def interaction_gradient(ensemble, data: Dataset, act: ActivationSpec = SIGMOID,
                         reg: RegularizerSpec = RegularizerSpec(), threads: int = 1,
                         cache: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Gradient of the interaction potential at each particle, shape ``(n, d)``.

    Equals ``n`` times the gradient of ``F(mu^n)`` with respect to that particle. The
    residual vector is computed once and shared by every particle. Particles are always
    processed in fixed blocks of ``PARTICLE_BLOCK`` rows, and threads only distribute
    those blocks, so the bits do not depend on the thread count.
    ``cache`` is the output of :func:`forward` for the same parameters.
    """
    theta = _as_matrix(ensemble)
    x = data.features
    s, res = forward(theta, data, act) if cache is None else cache
    out = np.empty_like(theta)
    starts = range(0, theta.shape[0], PARTICLE_BLOCK)

    def work(lo):
        hi = lo + PARTICLE_BLOCK
        out[lo:hi] = _gradient_block(theta[lo:hi], x, res, act, reg, s[lo:hi])

    if threads <= 1 or len(starts) < 2:
        for lo in starts:
            work(lo)
    else:
        with ThreadPoolExecutor(min(threads, len(starts))) as pool:
            list(pool.map(work, starts))
    return out


def batched_interaction_gradient(theta: np.ndarray, data: Dataset,
                                 act: ActivationSpec = SIGMOID,
                                 reg: RegularizerSpec = RegularizerSpec()) -> np.ndarray:
    """Interaction gradients for ``S`` independent ensembles of equal width, shape ``(S, n, d)``.

    Each ensemble has its own network and residuals; stacking them only shares the
    matrix products.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n_sys, n, d = theta.shape
    x = data.features
    _check_dim(theta[0], x)
    m = x.shape[0]
    flat = theta.reshape(n_sys * n, d)
    s = act(flat[:, :-1] @ x.T).reshape(n_sys, n, m)
    b = theta[:, :, -1:]
    res = (b * s).mean(axis=1) - data.labels
    grad = np.empty_like(theta)
    grad[:, :, -1] = np.einsum("snm,sm->sn", s, res) / m
    weighted = (act.deriv_from_value(s) * res[:, None, :]).reshape(n_sys * n, m)
    grad[:, :, :-1] = b * (weighted @ x).reshape(n_sys, n, d - 1) / m
    return grad + regularizer_grads(flat, reg).reshape(theta.shape)


def potential_field(ensemble, data: Dataset, grid_points, act: ActivationSpec = SIGMOID,
                    reg: RegularizerSpec = RegularizerSpec()) -> np.ndarray:
    """Interaction potential ``F'(mu^n)`` evaluated at arbitrary parameter points."""
    res = residuals(ensemble, data, act)
    pts = _as_matrix(grid_points)
    return basis_matrix(pts, data.features, act) @ res / data.m + regularizer_values(pts, reg)


def uv_kernels(data: Dataset, act: ActivationSpec = SIGMOID
               ) -> tuple[Callable[[ParamPoint, ParamPoint], float], Callable[[ParamPoint], float]]:
    """Pair kernel ``U(t, t~) = E[Psi(t) Psi(t~)]`` and single-particle term ``V(t) = -E[y Psi(t)]``."""
    x, y = data.features, data.labels

    def row(t):
        return basis_matrix(_as_matrix(t), x, act)[0]

    def U(t1, t2) -> float:
        return float(np.mean(row(t1) * row(t2)))

    def V(t) -> float:
        return -float(np.mean(y * row(t)))

    return U, V


# ---------------------------------------------------------------------------
# rectangular parameter grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred rectangular grid: per-axis ``(min, max, count)``."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        for name in ("mins", "maxs", "counts"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(np.atleast_1d(v).tolist()))
        if not (len(self.mins) == len(self.maxs) == len(self.counts)):
            raise ConfigError("grid axes disagree")
        if any(hi <= lo for lo, hi in zip(self.mins, self.maxs)) or min(self.counts) < 1:
            raise ConfigError("grid needs max > min and positive counts")

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.counts)

    @property
    def spacings(self) -> np.ndarray:
        return (np.array(self.maxs) - np.array(self.mins)) / np.array(self.counts)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def axes(self) -> list[np.ndarray]:
        return [lo + h * (np.arange(c) + 0.5)
                for lo, h, c in zip(self.mins, self.spacings, self.shape)]

    def points(self) -> np.ndarray:
        """Cell centres in row-major order, shape ``(cells, ndim)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def cell_index(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flat cell index of each point and a mask of points inside the grid."""
        pts = np.atleast_2d(pts)
        idx = np.floor((pts - np.array(self.mins)) / self.spacings).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, np.array(self.shape) - 1).T), self.shape)
        return flat, inside


def field_csv(grid: GridSpec, values: np.ndarray) -> str:
    """Row-major CSV with one ``theta<k>`` column per axis and a ``value`` column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"theta{k + 1}" for k in range(grid.ndim)] + ["value"])
    for p, v in zip(grid.points(), np.ravel(values)):
        w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
    return buf.getvalue()


class GridKernels:
    """The quadratic-loss functional restricted to a finite set of parameter cells.

    ``basis[c, j]`` is ``Psi(theta_c)(x_j)``; ``coords[c]`` are the coordinates at which the
    regularizer is evaluated. A linear problem ``F(rho) = <f, rho>`` is the case of an
    empty basis with ``V = f``.
    """

    def __init__(self, coords: np.ndarray, basis: np.ndarray | None, labels: np.ndarray | None,
                 potential: np.ndarray | None = None):
        coords = np.asarray(coords, dtype=float)
        self.coords = coords[:, None] if coords.ndim == 1 else coords
        ncell = self.coords.shape[0]
        if basis is None:
            self.basis = np.zeros((ncell, 0))
            self.labels = np.zeros(0)
        else:
            self.basis = np.asarray(basis, dtype=float)
            self.labels = np.asarray(labels, dtype=float)
        m = max(self.labels.size, 1)
        self.V = -self.basis @ self.labels / m
        if potential is not None:
            self.V = self.V + np.asarray(potential, dtype=float).ravel()
        self.half_y2 = 0.5 * float(np.mean(self.labels**2)) if self.labels.size else 0.0

    @property
    def linear(self) -> bool:
        return self.basis.shape[1] == 0

    @property
    def n_cells(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_dataset(cls, data: Dataset, coords: np.ndarray, act: ActivationSpec = SIGMOID,
                     embed: Callable[[np.ndarray], np.ndarray] | None = None) -> "GridKernels":
        """Kernels on cells; ``embed`` maps cell coordinates to full ``(cells, d)`` parameters."""
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        theta = coords if embed is None else embed(coords)
        return cls(coords, basis_matrix(theta, data.features, act), data.labels)

    @classmethod
    def linear_potential(cls, coords: np.ndarray, f: np.ndarray) -> "GridKernels":
        return cls(coords, None, None, potential=f)

    def U_matrix(self) -> np.ndarray:
        m = max(self.labels.size, 1)
        return self.basis @ self.basis.T / m

    def U_apply(self, w: np.ndarray) -> np.ndarray:
        """``U[rho]`` at each cell, for cell masses ``w``."""
        if self.linear:
            return np.zeros(self.n_cells)
        return self.basis @ (self.basis.T @ w) / self.labels.size

    def g(self, reg: RegularizerSpec) -> np.ndarray:
        return regularizer_values(self.coords, reg)

    def first_variation(self, w: np.ndarray, reg: RegularizerSpec) -> np.ndarray:
        """``F'(rho) = U[rho] + V + g`` on the cells, for cell masses ``w``."""
        return self.U_apply(w) + self.V + self.g(reg)

    def objective(self, w: np.ndarray, reg: RegularizerSpec, lam: float = 1.0) -> float:
        """``F_lam(rho) = 1/2 U[rho, rho] + <V, rho> + 1/2 |y|^2 + lam <g, rho>``."""
        w = np.asarray(w, dtype=float).ravel()
        quad = 0.0
        if not self.linear:
            psi = self.basis.T @ w
            quad = 0.5 * float(psi @ psi) / self.labels.size
        return quad + float(self.V @ w) + self.half_y2 + lam * float(self.g(reg) @ w)
