"""Rank-based surrogate: Ranking-SVM over chain constraints with a whitened RBF kernel.

Training points are sorted by objective value and only the ``q - 1``
constraints between consecutive points are imposed.  The dual is solved by
cyclic coordinate ascent for a fixed number of updates, so the cost of a
training call is bounded in advance.  All geometry happens in the whitened
coordinates of the distribution the training points came from, which makes
the model invariant to rotations of the search space learned by the
optimizer, and only the order of the objective values enters, which makes it
invariant to monotone transformations of the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .distribution import GaussianParams, mahalanobis, whiten

__all__ = [
    "EvaluatedSample",
    "Archive",
    "TrainingSet",
    "SurrogateHyperParams",
    "SurrogateModel",
    "SurrogateTrainingError",
    "select_training_set",
    "kernel",
    "train",
    "predict",
    "drift_error",
    "pairwise_loss_sum",
    "RankSVMSurrogate",
]


class SurrogateTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvaluatedSample:
    point: np.ndarray
    value: float
    eval_index: int


class Archive:
    """Append-only store of every true evaluation of a run."""

    def __init__(self, dim: int):
        self.dim = dim
        self._points = np.empty((64, dim))
        self._values = np.empty(64)
        self._index = np.empty(64, dtype=np.int64)
        self.size = 0

    def __len__(self):
        return self.size

    def extend(self, points, values, first_index: int | None = None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(values, dtype=float).reshape(-1)
        k = points.shape[0]
        if values.shape[0] != k:
            raise ValueError("points and values differ in length")
        if first_index is None:
            first_index = int(self._index[self.size - 1]) + 1 if self.size else 1
        while self.size + k > self._points.shape[0]:
            cap = 2 * self._points.shape[0]
            self._points = np.resize(self._points, (cap, self.dim))
            self._values = np.resize(self._values, cap)
            self._index = np.resize(self._index, cap)
        sl = slice(self.size, self.size + k)
        self._points[sl] = points
        self._values[sl] = values
        self._index[sl] = np.arange(first_index, first_index + k)
        self.size += k

    @property
    def points(self) -> np.ndarray:
        return self._points[: self.size]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self.size]

    @property
    def indices(self) -> np.ndarray:
        return self._index[: self.size]

    def samples(self) -> list[EvaluatedSample]:
        return [
            EvaluatedSample(p.copy(), float(v), int(i))
            for p, v, i in zip(self.points, self.values, self.indices)
        ]

    @classmethod
    def from_samples(cls, samples) -> Archive:
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        arch = cls(len(samples[0].point))
        for s in samples:
            arch.extend([s.point], [s.value], s.eval_index)
        return arch


def _value_order(values, indices) -> np.ndarray:
    # non-finite values sort last; ties broken by evaluation index
    keyed = np.where(np.isfinite(values), values, np.inf)
    return np.lexsort((indices, keyed))


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """``q`` evaluated points sorted by increasing value, and their source distribution."""

    points: np.ndarray
    values: np.ndarray
    indices: np.ndarray
    source_dist: GaussianParams

    def __post_init__(self):
        q = self.points.shape[0]
        if q < 2:
            raise ValueError(f"a training set needs at least 2 points, got {q}")
        order = _value_order(self.values, self.indices)
        if not np.array_equal(order, np.arange(q)):
            raise ValueError("training samples must be sorted by (value, eval_index)")

    @classmethod
    def from_arrays(cls, points, values, indices, source_dist) -> TrainingSet:
        points = np.asarray(points, dtype=float)
        values = np.asarray(values, dtype=float)
        indices = np.asarray(indices)
        order = _value_order(values, indices)
        return cls(points[order], values[order], indices[order], source_dist)

    @property
    def q(self) -> int:
        return self.points.shape[0]

    @property
    def samples(self) -> list[EvaluatedSample]:
        return [
            EvaluatedSample(p, float(v), int(i))
            for p, v, i in zip(self.points, self.values, self.indices)
        ]


def select_training_set(archive, dist: GaussianParams, q: int) -> TrainingSet:
    """The ``q`` archived points Mahalanobis-closest to ``dist.mean``.

    ``archive`` is an :class:`Archive`, a :class:`TrainingSet` or a sequence of
    :class:`EvaluatedSample`.  Distance ties go to the earlier evaluation.
    """
    if not isinstance(archive, (Archive, TrainingSet)):
        archive = Archive.from_samples(archive)
    size = archive.points.shape[0]
    if q < 2:
        raise ValueError("q must be >= 2")
    if size < q:
        raise ValueError(f"archive holds {size} points, fewer than q = {q}")
    points, values, indices = archive.points, archive.values, archive.indices
    if size > q:
        by_index = np.argsort(indices, kind="stable")
        dist_to_mean = mahalanobis(dist, points[by_index])
        chosen = by_index[np.argsort(dist_to_mean, kind="stable")[:q]]
        points, values, indices = points[chosen], values[chosen], indices[chosen]
    return TrainingSet.from_arrays(points, values, indices, dist)


def kernel(a, b, dist: GaussianParams, s: float) -> float:
    """RBF kernel on whitened coordinates, ``exp(-||W a - W b||^2 / (2 s^2))``."""
    if s <= 0:
        raise ValueError("kernel width must be positive")
    diff = whiten(dist, a) - whiten(dist, b)
    return math.exp(-float(diff @ diff) / (2 * s * s))


def _gram(u: np.ndarray, v: np.ndarray, s: float) -> np.ndarray:
    sq = (
        np.sum(u * u, axis=1)[:, None]
        + np.sum(v * v, axis=1)[None, :]
        - 2.0 * (u @ v.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2 * s * s))


#: Sweeps of the dual solver when ``solver_iters`` is not given.
DEFAULT_SWEEPS = 200


@dataclass(frozen=True)
class SurrogateHyperParams:
    """Learning hyper-parameters.

    ``cost_base`` is the box bound of the constraint between the two worst
    training points; each step towards the best point multiplies it by
    ``cost_growth``.  ``solver_iters`` bounds the number of cyclic sweeps of
    the dual solver (``None`` means :data:`DEFAULT_SWEEPS`); the solver stops
    earlier once every projected gradient is below ``tol``.  ``relaxation``
    is the over-relaxation factor of the coordinate steps, in ``(0, 2)``.
    """

    q: int
    width: float
    cost_base: float
    cost_growth: float = 1.05
    solver_iters: int | None = None
    tol: float = 1e-3
    relaxation: float = 1.9

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("q must be >= 2")
        if not 0 < self.relaxation < 2:
            raise ValueError("relaxation must lie in (0, 2)")
        if not self.width > 0:
            raise ValueError("width must be positive")
        if self.cost_base < 0 or self.cost_growth <= 0:
            raise ValueError("costs must be non-negative")

    def costs(self, q: int | None = None) -> np.ndarray:
        q = self.q if q is None else q
        steps_from_worst = np.arange(q - 2, -1, -1, dtype=float)
        return self.cost_base * self.cost_growth**steps_from_worst

    def sweeps(self) -> int:
        return DEFAULT_SWEEPS if self.solver_iters is None else int(self.solver_iters)


@numba.njit(cache=True)
def _dual_coordinate_ascent(Q, cost, n_sweeps, tol, omega):
    # Maximizes sum(alpha) - alpha' Q alpha / 2 over the box [0, cost] by
    # cyclic projected coordinate steps, over-relaxed by ``omega`` (1 gives
    # exact coordinate maximization).  Neighbouring chain constraints are
    # strongly coupled, which makes plain steps crawl.  Stops early once no
    # coordinate's projected gradient exceeds ``tol``.
    m = Q.shape[0]
    alpha = np.zeros(m)
    grad = np.ones(m)
    for _ in range(n_sweeps):
        worst = 0.0
        for i in range(m):
            qii = Q[i, i]
            if qii <= 1e-12:
                continue
            g = grad[i]
            if (alpha[i] <= 0.0 and g < 0.0) or (alpha[i] >= cost[i] and g > 0.0):
                continue
            if abs(g) > worst:
                worst = abs(g)
            new = alpha[i] + omega * g / qii
            if new < 0.0:
                new = 0.0
            elif new > cost[i]:
                new = cost[i]
            delta = new - alpha[i]
            if delta != 0.0:
                alpha[i] = new
                for j in range(m):
                    grad[j] -= delta * Q[j, i]
        if worst < tol:
            break
    return alpha


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """Trained rank predictor, frozen to the distribution of its training data."""

    support: np.ndarray
    duals: np.ndarray
    frozen_dist: GaussianParams
    width: float
    train_misrank: float
    costs: np.ndarray

    @property
    def coef(self) -> np.ndarray:
        # score(x) = sum_j duals_j (K(x_j, x) - K(x_{j+1}, x)) = sum_i coef_i K(x_i, x)
        coef = np.zeros(self.support.shape[0])
        coef[:-1] += self.duals
        coef[1:] -= self.duals
        return coef

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        gram = _gram(whiten(self.frozen_dist, X), self.support, self.width)
        return gram @ self.coef


def chain_misrank(scores) -> float:
    """Fraction of consecutive pairs scored out of order; ties count one half."""
    scores = np.asarray(scores, dtype=float)
    better, worse = scores[:-1], scores[1:]
    loss = np.where(better < worse, 1.0, np.where(better == worse, 0.5, 0.0))
    return float(loss.mean())


def train(ts: TrainingSet, hp: SurrogateHyperParams) -> SurrogateModel:
    """Fit the chain-constrained Ranking-SVM dual on ``ts``."""
    support = whiten(ts.source_dist, ts.points)
    if np.ptp(support, axis=0).max() == 0:
        raise SurrogateTrainingError("all training points are identical")
    K = _gram(support, support, hp.width)
    Q = K[:-1, :-1] - K[:-1, 1:] - K[1:, :-1] + K[1:, 1:]
    cost = hp.costs(ts.q)
    duals = _dual_coordinate_ascent(np.ascontiguousarray(Q), cost, hp.sweeps(), hp.tol,
                                    hp.relaxation)
    model = SurrogateModel(support, duals, ts.source_dist, float(hp.width), 0.0, cost)
    misrank = chain_misrank(K @ model.coef)
    return SurrogateModel(support, duals, ts.source_dist, float(hp.width), misrank, cost)


def predict(model: SurrogateModel, x) -> float | np.ndarray:
    """Rank score of ``x``; larger means better (smaller objective value)."""
    x = np.asarray(x, dtype=float)
    scores = model.scores(x)
    return float(scores[0]) if x.ndim == 1 else scores


def pairwise_loss_sum(scores, values) -> float:
    """Sum of the pairwise ranking loss over all ordered pairs ``i != j``.

    A pair costs 1 when the scores order it against the values, 1/2 when
    either the values or the scores tie, and 0 otherwise.
    """
    scores = np.asarray(scores, dtype=float)
    values = np.asarray(values, dtype=float)
    vi, vj = values[:, None], values[None, :]
    si, sj = scores[:, None], scores[None, :]
    # comparisons rather than differences, so that inf against inf is a tie
    dv = (vi > vj).astype(float) - (vi < vj)
    ds = (sj > si).astype(float) - (sj < si)
    loss = np.where((dv == 0) | (ds == 0), 0.5, (dv != ds).astype(float))
    np.fill_diagonal(loss, 0.0)
    return float(loss.sum())


def drift_error(model: SurrogateModel, test) -> float:
    """Empirical ranking error of ``model`` on fresh evaluated points.

    ``test`` is a sequence of :class:`EvaluatedSample` or a ``(points,
    values)`` pair.
    """
    if isinstance(test, tuple) and len(test) == 2 and not isinstance(test[0], EvaluatedSample):
        points, values = test
    else:
        points = np.array([s.point for s in test])
        values = np.array([s.value for s in test])
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m < 2:
        raise ValueError("drift error needs at least 2 test points")
    values = np.where(np.isfinite(values), values, np.inf)
    return pairwise_loss_sum(model.scores(points), values) / (m * (m - 1))


class RankSVMSurrogate(BaseEstimator):
    """Estimator wrapper around :func:`train` / :func:`predict`.

    ``fit(X, y, dist=...)`` learns a ranking of ``X`` by increasing ``y`` in
    the whitened coordinates of ``dist`` (identity when omitted).
    ``predict`` returns rank scores and ``score`` returns one minus the
    drift error, so larger is better in both.
    """

    def __init__(self, width=1.0, cost_base=1000.0, cost_growth=1.05, solver_iters=None):
        self.width = width
        self.cost_base = cost_base
        self.cost_growth = cost_growth
        self.solver_iters = solver_iters

    def fit(self, X, y, dist: GaussianParams | None = None):
        X, y = check_X_y(X, y, dtype=float, ensure_min_samples=2, ensure_all_finite=False)
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite coordinates")
        if dist is None:
            dist = GaussianParams.isotropic(np.zeros(X.shape[1]))
        ts = TrainingSet.from_arrays(X, y, np.arange(X.shape[0]), dist)
        hp = SurrogateHyperParams(
            q=ts.q,
            width=self.width,
            cost_base=self.cost_base,
            cost_growth=self.cost_growth,
            solver_iters=self.solver_iters,
        )
        self.model_ = train(ts, hp)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return self.model_.scores(X)

    def score(self, X, y):
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=float, ensure_min_samples=2, ensure_all_finite=False)
        return 1.0 - drift_error(self.model_, (X, y))
