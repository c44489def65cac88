"""Noiseless benchmark functions with shifted optima, rotations and power transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FUNCTIONS",
    "GROUPS",
    "BenchmarkSpec",
    "BenchmarkInstance",
    "make_instance",
    "evaluate",
    "random_rotation",
    "base_value",
]


def _sphere(z, condition):
    return float(z @ z)


def _ellipsoid(z, condition):
    n = z.shape[0]
    if n == 1:
        return float(z @ z)
    scales = condition ** (np.arange(n) / (n - 1))
    return float(scales @ (z * z))


def _discus(z, condition):
    return float(condition * z[0] ** 2 + z[1:] @ z[1:])


def _cigar(z, condition):
    return float(z[0] ** 2 + condition * (z[1:] @ z[1:]))


def _rosenbrock(z, condition):
    head, tail = z[:-1], z[1:]
    return float(np.sum(100.0 * (head**2 - tail) ** 2 + (head - 1.0) ** 2))


def _rastrigin(z, condition):
    n = z.shape[0]
    return float(10.0 * (n - np.sum(np.cos(2 * math.pi * z))) + z @ z)


_BASE = {
    "sphere": _sphere,
    "ellipsoid": _ellipsoid,
    "rosenbrock": _rosenbrock,
    "discus": _discus,
    "cigar": _cigar,
    "rastrigin": _rastrigin,
    "attractive_sector": None,  # needs the optimum, see base_value
}

FUNCTIONS = tuple(_BASE)

#: Difficulty groups used to aggregate ECDFs.
GROUPS = {
    "separable": ("sphere", "ellipsoid", "rastrigin"),
    "ill-conditioned": ("ellipsoid", "discus", "cigar"),
    "non-separable": ("rosenbrock", "attractive_sector"),
    "multi-modal": ("rastrigin",),
    "all": FUNCTIONS,
}


@dataclass(frozen=True)
class BenchmarkSpec:
    """Which function, in which dimension, with which instance transformations."""

    function_id: str
    dim: int
    rotate: bool = False
    power: float = 1.0
    condition: float = 1e6

    def __post_init__(self):
        if self.function_id not in _BASE:
            raise ValueError(
                f"unknown function {self.function_id!r}; choose from {', '.join(FUNCTIONS)}"
            )
        if self.dim < 1 or (self.function_id == "rosenbrock" and self.dim < 2):
            raise ValueError(f"invalid dimension {self.dim} for {self.function_id}")
        if not self.power > 0:
            raise ValueError("power must be positive")
        if not self.condition > 0:
            raise ValueError("condition must be positive")

    @property
    def reference(self) -> np.ndarray:
        """Point where the untransformed base function attains 0."""
        if self.function_id == "rosenbrock":
            return np.ones(self.dim)
        return np.zeros(self.dim)


@dataclass(eq=False)
class BenchmarkInstance:
    spec: BenchmarkSpec
    optimum: np.ndarray
    rotation: np.ndarray
    eval_count: int = field(default=0)

    def __call__(self, x) -> float:
        return evaluate(self, x)


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed orthogonal matrix (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_instance(spec: BenchmarkSpec, seed) -> BenchmarkInstance:
    """Deterministic instance of ``spec``: random optimum in ``[-4, 4]^n`` and rotation."""
    rng = np.random.default_rng(seed)
    optimum = rng.uniform(-4.0, 4.0, spec.dim)
    rotation = random_rotation(spec.dim, rng) if spec.rotate else np.eye(spec.dim)
    return BenchmarkInstance(spec, optimum, rotation)


def base_value(spec: BenchmarkSpec, z, optimum=None) -> float:
    """Untransformed function value at ``z`` (0 at ``z = 0`` for every function
    but Rosenbrock, whose zero is at ``z = 1``)."""
    z = np.asarray(z, dtype=float)
    if spec.function_id == "attractive_sector":
        direction = np.ones(spec.dim) if optimum is None else np.asarray(optimum)
        s = np.where(z * direction > 0, 100.0, 1.0)
        return float(np.sum((s * z) ** 2))
    return _BASE[spec.function_id](z, spec.condition)


def evaluate(inst: BenchmarkInstance, x) -> float:
    """Objective value of ``x`` on ``inst``; counts one evaluation."""
    x = np.asarray(x, dtype=float)
    spec = inst.spec
    if x.shape != (spec.dim,):
        raise ValueError(f"expected a point of dimension {spec.dim}, got shape {x.shape}")
    z = inst.rotation @ (x - inst.optimum) + spec.reference
    value = base_value(spec, z, inst.optimum)
    inst.eval_count += 1
    if spec.power == 1:
        return value
    with np.errstate(over="ignore"):
        return float(np.power(value, spec.power))
