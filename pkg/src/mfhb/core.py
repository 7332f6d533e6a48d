"""Domain types, counter-based random streams, dataset synthesis and run configuration.

Parameters of a neuron are stored flat as length-``d`` vectors ``(a_1, ..., a_{d-1}, b)``:
first-layer weights first, output weight last.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or malformed input."""


# ---------------------------------------------------------------------------
# counter-based random numbers
# ---------------------------------------------------------------------------

_MASK64 = 0xFFFFFFFFFFFFFFFF


class Stream(int, Enum):
    """Tags separating the independent random streams of a run."""

    INIT_THETA = 1
    INIT_R = 2
    DYNAMICS = 3
    FEATURES = 4
    TEACHER = 5
    SAMPLER = 6


class KeyedNormals:
    """Counter-based standard normals for a fixed set of particle keys.

    One Philox block is drawn per ``(seed, stream, counter)``; the step counter sits in the
    second counter word so distinct counters never share random words. Row ``i`` of a
    ``(len(keys), dim)`` draw is the block row at the rank of ``keys[i]`` among the
    distinct keys, so permuting keys permutes rows and equal keys get equal draws.
    The ranks are computed once, which matters when the same keys are drawn every step.
    """

    def __init__(self, keys):
        keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
        uniq, rank = np.unique(keys, return_inverse=True)
        self.n_unique = uniq.size
        self.rank = None if np.array_equal(rank, np.arange(keys.size)) else rank.reshape(-1)

    def __call__(self, seed: int, stream: int, counter: int, dim: int,
                 out: np.ndarray | None = None) -> np.ndarray:
        bitgen = np.random.Philox(
            key=np.array([seed & _MASK64, int(stream) & _MASK64], dtype=np.uint64),
            counter=np.array([0, counter & _MASK64, 0, 0], dtype=np.uint64),
        )
        gen = np.random.Generator(bitgen)
        if self.rank is None:
            return gen.standard_normal((self.n_unique, dim), out=out)
        block = gen.standard_normal((self.n_unique, dim))[self.rank]
        if out is None:
            return block
        out[...] = block
        return out


def counter_normals(seed: int, stream: int, keys, counter: int, dim: int) -> np.ndarray:
    """Standard normal draws indexed by ``(seed, stream, counter)`` and particle key;
    see :class:`KeyedNormals`."""
    return KeyedNormals(keys)(seed, stream, counter, dim)


# ---------------------------------------------------------------------------
# regularizer / activation specs (shared by config and model)
# ---------------------------------------------------------------------------


class Integrator(str, Enum):
    SHB = "SHB"
    HB = "HB"
    AGD = "AGD"
    GF = "GF"


class RegKind(str, Enum):
    NONE = "none"
    SMOOTHED_NORM = "smoothed_norm"
    QUADRATIC = "quadratic"


class ActKind(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"


@dataclass(frozen=True)
class RegularizerSpec:
    kind: RegKind = RegKind.NONE
    c: float = 0.0
    eps: float = 1e-3

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", RegKind(self.kind))
            object.__setattr__(self, "c", float(self.c))
            object.__setattr__(self, "eps", float(self.eps))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad regularizer: {exc}") from exc
        if self.c < 0:
            raise ConfigError("regularizer coefficient must be nonnegative")
        if self.kind is RegKind.SMOOTHED_NORM and not self.eps > 0:
            raise ConfigError("smoothed norm needs eps > 0")

    @classmethod
    def none(cls) -> "RegularizerSpec":
        return cls(RegKind.NONE, 0.0)

    @classmethod
    def smoothed_norm(cls, c: float = 0.01, eps: float = 1e-3) -> "RegularizerSpec":
        return cls(RegKind.SMOOTHED_NORM, c, eps)

    @classmethod
    def quadratic(cls, c: float = 1.0) -> "RegularizerSpec":
        return cls(RegKind.QUADRATIC, c)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "c": self.c, "eps": self.eps}


@dataclass(frozen=True)
class ActivationSpec:
    kind: ActKind = ActKind.SIGMOID

    def __post_init__(self):
        object.__setattr__(self, "kind", ActKind(self.kind))

    def __call__(self, z):
        if self.kind is ActKind.SIGMOID:
            return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))
        return np.tanh(z)

    def deriv(self, z):
        return self.deriv_from_value(self(z))

    def deriv_from_value(self, s):
        """Derivative expressed through the activation value ``s = act(z)``."""
        if self.kind is ActKind.SIGMOID:
            return s * (1.0 - s)
        return 1.0 - s * s


SIGMOID = ActivationSpec(ActKind.SIGMOID)


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------


def _frozen(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParamPoint:
    """One neuron: first-layer weights ``a`` and output weight ``b``."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        a = _frozen(np.atleast_1d(self.a))
        if a.ndim != 1:
            raise ConfigError("a must be a vector")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))
        if not (np.all(np.isfinite(a)) and math.isfinite(self.b)):
            raise ConfigError("ParamPoint entries must be finite")

    @property
    def dim(self) -> int:
        return self.a.size + 1

    def to_vector(self) -> np.ndarray:
        return np.append(self.a, self.b)

    @classmethod
    def from_vector(cls, v) -> "ParamPoint":
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ConfigError("parameter vector needs length >= 2")
        return cls(v[:-1], v[-1])

    def __eq__(self, other):
        return (
            isinstance(other, ParamPoint)
            and self.b == other.b
            and np.array_equal(self.a, other.a)
        )

    __hash__ = None


@dataclass(frozen=True)
class ParticleState:
    theta: ParamPoint
    r: np.ndarray

    def __post_init__(self):
        r = _frozen(np.atleast_1d(self.r))
        if r.shape != (self.theta.dim,):
            raise ConfigError("theta and r dimensions differ")
        object.__setattr__(self, "r", r)

    def __eq__(self, other):
        return (
            isinstance(other, ParticleState)
            and self.theta == other.theta
            and np.array_equal(self.r, other.r)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Ensemble:
    """n particles stored as ``(n, d)`` arrays of positions and velocities.

    ``keys`` identify each particle's random stream; they travel with the particle under
    reordering.
    """

    theta: np.ndarray
    r: np.ndarray
    time: float = 0.0
    keys: np.ndarray | None = None

    def __post_init__(self):
        theta = _frozen(self.theta)
        r = _frozen(self.r)
        if theta.ndim != 2 or theta.shape[0] < 1 or theta.shape[1] < 2:
            raise ConfigError("theta must have shape (n, d) with n >= 1, d >= 2")
        if r.shape != theta.shape:
            raise ConfigError("theta and r shapes differ")
        keys = np.arange(theta.shape[0]) if self.keys is None else self.keys
        keys = _frozen(keys, dtype=np.uint64)
        if keys.shape != (theta.shape[0],):
            raise ConfigError("one key per particle required")
        if self.time < 0:
            raise ConfigError("time must be nonnegative")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Mass of each particle in the empirical measure."""
        return np.full(self.n, 1.0 / self.n)

    @property
    def particles(self) -> list[ParticleState]:
        return [
            ParticleState(ParamPoint.from_vector(t), r) for t, r in zip(self.theta, self.r)
        ]

    @property
    def thetas(self) -> list[ParamPoint]:
        return [ParamPoint.from_vector(t) for t in self.theta]

    @classmethod
    def from_particles(cls, particles: Sequence[ParticleState], time: float = 0.0, keys=None):
        if not particles:
            raise ConfigError("ensemble needs at least one particle")
        theta = np.stack([p.theta.to_vector() for p in particles])
        r = np.stack([p.r for p in particles])
        return cls(theta, r, time, keys)

    def with_state(self, theta, r, time) -> "Ensemble":
        return Ensemble(theta, r, time, self.keys)

    def permuted(self, perm) -> "Ensemble":
        perm = np.asarray(perm)
        return Ensemble(self.theta[perm], self.r[perm], self.time, self.keys[perm])

    def __eq__(self, other):
        return (
            isinstance(other, Ensemble)
            and self.time == other.time
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.keys, other.keys)
        )

    def to_dict(self) -> dict:
        return {
            "particles": [
                {"theta": {"a": t[:-1].tolist(), "b": float(t[-1])}, "r": r.tolist()}
                for t, r in zip(self.theta, self.r)
            ],
            "dim": self.dim,
            "time": self.time,
            "keys": [int(k) for k in self.keys],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Ensemble":
        parts = obj["particles"]
        theta = np.array([p["theta"]["a"] + [p["theta"]["b"]] for p in parts], dtype=float)
        r = np.array([p["r"] for p in parts], dtype=float)
        if theta.shape[1] != obj["dim"]:
            raise ConfigError("particle dimension does not match 'dim'")
        return cls(theta, r, obj["time"], obj.get("keys"))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TeacherSpec:
    """Ground-truth network: ``(n0, d)`` neuron parameters and its activation."""

    theta: np.ndarray
    activation: ActivationSpec = SIGMOID

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(np.atleast_2d(self.theta)))

    @property
    def n0(self) -> int:
        return self.theta.shape[0]

    def __call__(self, features: np.ndarray) -> np.ndarray:
        a, b = self.theta[:, :-1], self.theta[:, -1]
        return (b[:, None] * self.activation(a @ features.T)).mean(axis=0)

    def __eq__(self, other):
        return (
            isinstance(other, TeacherSpec)
            and self.activation == other.activation
            and np.array_equal(self.theta, other.theta)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Fixed sample ``(x_j, y_j)``; all expectations are over its empirical measure."""

    features: np.ndarray
    labels: np.ndarray
    teacher: TeacherSpec | None = None

    def __post_init__(self):
        x = _frozen(np.atleast_2d(self.features))
        y = _frozen(np.atleast_1d(self.labels))
        if x.shape[0] < 1 or y.shape != (x.shape[0],):
            raise ConfigError("features and labels must be nonempty and of equal length")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def m(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1] + 1

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.teacher == other.teacher
        )

    def to_dict(self) -> dict:
        teacher = None
        if self.teacher is not None:
            teacher = {
                "theta": self.teacher.theta.tolist(),
                "activation": self.teacher.activation.kind.value,
            }
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "teacher": teacher,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Dataset":
        t = obj.get("teacher")
        teacher = None
        if t is not None:
            teacher = TeacherSpec(np.array(t["theta"], dtype=float), ActivationSpec(t["activation"]))
        return cls(np.array(obj["features"], dtype=float), np.array(obj["labels"], dtype=float), teacher)


def sample_teacher(d: int, n0: int, seed: int, init_scale: float = 1.0,
                   act: ActivationSpec = SIGMOID) -> TeacherSpec:
    theta = init_scale * counter_normals(seed, Stream.TEACHER, np.arange(n0), 0, d)
    return TeacherSpec(theta, act)


def dataset_from_teacher(teacher: TeacherSpec, m: int, seed: int) -> Dataset:
    if m < 1:
        raise ConfigError("m must be >= 1")
    d = teacher.theta.shape[1]
    x = counter_normals(seed, Stream.FEATURES, np.arange(m), 0, d - 1)
    return Dataset(x, teacher(x), teacher)


def sample_dataset(d: int, n0: int, m: int, seed: int, init_scale: float = 1.0,
                   act: ActivationSpec = SIGMOID) -> Dataset:
    """Standard Gaussian features labelled by a random teacher of width ``n0``."""
    if d < 2:
        raise ConfigError("d must be >= 2")
    if n0 < 1:
        raise ConfigError("n0 must be >= 1")
    if m < 1:
        raise ConfigError("m must be >= 1")
    return dataset_from_teacher(sample_teacher(d, n0, seed, init_scale, act), m, seed)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    d: int = 2
    n: int = 100
    n0: int = 10
    m: int = 100
    gamma: float = 1.0
    beta: float = 100.0
    dt: float = 1e-2
    steps: int = 1000
    seed: int = 0
    integrator: Integrator = Integrator.SHB
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    record_every: int = 100
    init_scale: float = 1.0
    t_floor: float = 1.0
    activation: ActKind = ActKind.SIGMOID
    diagnostics: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "integrator", Integrator(self.integrator))
            object.__setattr__(self, "activation", ActKind(self.activation))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if isinstance(self.regularizer, dict):
            object.__setattr__(self, "regularizer", RegularizerSpec(**self.regularizer))
        for name in ("d", "n", "n0", "m", "steps", "record_every", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer")
        if self.d < 2:
            raise ConfigError("d must be >= 2")
        if self.n < 1 or self.n0 < 1 or self.m < 1:
            raise ConfigError("n, n0, m must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.record_every < 1:
            raise ConfigError("record_every must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        for name in ("gamma", "beta", "dt", "init_scale", "t_floor"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
                raise ConfigError(f"{name} must be a number")
            v = float(v)
            object.__setattr__(self, name, v)
            if not v > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def act(self) -> ActivationSpec:
        return ActivationSpec(self.activation)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["integrator"] = self.integrator.value
        out["activation"] = self.activation.value
        out["regularizer"] = self.regularizer.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "regularizer" in obj and isinstance(obj["regularizer"], dict):
            obj["regularizer"] = RegularizerSpec(**obj["regularizer"])
        try:
            return cls(**obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_flat(cls, flat: dict[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        """Build from flat dotted keys such as ``regularizer.c``."""
        obj = (base or cls()).to_dict()
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head != "regularizer" or tail not in obj["regularizer"]:
                    raise ConfigError(f"unknown config key: {key}")
                obj["regularizer"][tail] = value
            elif key == "regularizer" and isinstance(value, dict):
                obj["regularizer"].update(value)
            else:
                obj[key] = value
        return cls.from_dict(obj)


def to_json(obj) -> str:
    return json.dumps(obj.to_dict(), sort_keys=True)


def from_json(kind: type, text: str):
    return kind.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_ensemble(config: RunConfig) -> Ensemble:
    """Gaussian positions (scale ``init_scale``) and velocities with covariance ``I/beta``."""
    if config.n < 1:
        raise ConfigError("n must be >= 1")
    if config.d < 2:
        raise ConfigError("d must be >= 2")
    keys = np.arange(config.n)
    theta = config.init_scale * counter_normals(config.seed, Stream.INIT_THETA, keys, 0, config.d)
    r = counter_normals(config.seed, Stream.INIT_R, keys, 0, config.d) / math.sqrt(config.beta)
    return Ensemble(theta, r, 0.0, keys)
