"""Run records and the evaluation-budget wrapper shared by all optimizers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = ["EpochReport", "RunRecord", "Evaluator", "StopRun"]

TERMINATIONS = ("target", "budget", "failure")


@dataclass
class EpochReport:
    """Diagnostics for one surrogate epoch."""

    surrogate_generations: int
    kl_at_exit: float
    drift_err: float
    true_evals_used: int
    best_f: float
    kl_thresh: float = math.nan
    err_relaxed: float = math.nan
    tuning_failed: bool = False
    kl_trace: list = field(default_factory=list)


@dataclass
class RunRecord:
    """Trace of one optimization run, counted in true objective evaluations.

    ``trace`` holds ``(eval_index, best_f)`` pairs, one per evaluation that
    improved the best-so-far value, plus the final evaluation.  Indices are
    1-based, so ``eval_index`` is also the number of evaluations spent.
    """

    algorithm: str
    trace: list = field(default_factory=list)
    evaluations: int = 0
    termination: str = "budget"
    best_x: np.ndarray | None = None
    function: str = ""
    dim: int = 0
    seed: int | None = None
    run: int = 0
    restarts: int = 0
    hit: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)

    @property
    def best_f(self) -> float:
        return self.trace[-1][1] if self.trace else math.inf

    def first_hit(self, target: float) -> int | None:
        """First evaluation index whose best-so-far value is ``<= target``."""
        for index, value in self.trace:
            if value <= target:
                return index
        return None

    def compute_hits(self, targets) -> dict:
        self.hit = {}
        for t in targets:
            idx = self.first_hit(t)
            if idx is not None:
                self.hit[float(t)] = idx
        return self.hit

    def summary(self) -> dict:
        out = {
            k: v
            for k, v in asdict(self).items()
            if k not in ("trace", "best_x", "epochs", "hit")
        }
        out["best_f"] = self.best_f
        out["hit"] = {repr(k): v for k, v in self.hit.items()}
        return out


class StopRun(Exception):
    """Raised by :class:`Evaluator` when the run must end."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Evaluator:
    """Wraps a black-box objective with a budget, a target and a trace.

    Points are evaluated one at a time in row order.  Evaluating past the
    budget or reaching the target raises :class:`StopRun`; the trace is
    complete at that point.  Non-finite values are passed through so that the
    caller can rank them worst, but never become the best-so-far value.
    """

    def __init__(self, objective, budget: int, target: float = -math.inf,
                 keep_points: bool = False):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.objective = objective
        self.budget = int(budget)
        self.target = target
        self.count = 0
        self.best_f = math.inf
        self.best_x = None
        self.last_value = math.nan
        self.trace: list[tuple[int, float]] = []
        self.points: list[np.ndarray] | None = [] if keep_points else None

    @property
    def remaining(self) -> int:
        return self.budget - self.count

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        values = np.empty(X.shape[0])
        for i, x in enumerate(X):
            values[i] = self.evaluate_one(x)
        return values

    def evaluate_one(self, x) -> float:
        if self.count >= self.budget:
            self._close()
            raise StopRun("budget")
        x = np.array(x, dtype=float)
        value = float(self.objective(x))
        self.count += 1
        self.last_value = value
        if self.points is not None:
            self.points.append(x)
        if math.isfinite(value) and value < self.best_f:
            self.best_f = value
            self.best_x = x
            self.trace.append((self.count, value))
            if value <= self.target:
                raise StopRun("target")
        return value

    def _close(self):
        if self.count and (not self.trace or self.trace[-1][0] != self.count):
            self.trace.append((self.count, self.best_f))

    def record(self, algorithm: str, termination: str, **kwargs) -> RunRecord:
        self._close()
        if termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {termination!r}")
        return RunRecord(
            algorithm=algorithm,
            trace=list(self.trace),
            evaluations=self.count,
            termination=termination,
            best_x=self.best_x,
            **kwargs,
        )
