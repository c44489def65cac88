"""(mu/mu_w, lambda)-CMA-ES with an ask/tell interface over value states.

The update is the standard non-active one: weighted recombination of the mu
best points, rank-one plus rank-mu covariance update, cumulative step-size
adaptation.  :func:`tell` only looks at the ranking of the population, which
is what makes every optimizer built on it invariant to strictly increasing
transformations of the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from .distribution import GaussianParams, sample
from .records import Evaluator, RunRecord, StopRun

__all__ = [
    "CmaParams",
    "CmaState",
    "RankedPopulation",
    "default_params",
    "initial_state",
    "rank_order",
    "ask",
    "tell",
    "with_population",
    "with_sample_size",
    "should_restart",
    "CMAES",
]

TOL_SIGMA = 1e-12
TOL_CONDITION = 1e14
TOL_FUN = 1e-12


@dataclass(frozen=True, eq=False)
class CmaParams:
    dim: int
    lam: int
    mu: int
    weights: np.ndarray
    mueff: float
    c1: float
    cmu: float
    cc: float
    csigma: float
    dsigma: float
    chi_n: float


def default_params(n: int, lambda_override: int | None = None) -> CmaParams:
    """Default strategy parameters for dimension ``n``."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    if lambda_override is None:
        lam = 4 + int(math.floor(3 * math.log(n)))
    else:
        lam = int(lambda_override)
        if lam < 2:
            raise ValueError(f"population size must be >= 2, got {lam}")
    mu = lam // 2
    weights = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mueff = 1.0 / float(np.sum(weights**2))

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    csigma = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    dsigma = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + csigma
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
    weights.setflags(write=False)
    return CmaParams(n, lam, mu, weights, mueff, c1, cmu, cc, csigma, dsigma, chi_n)


@dataclass(frozen=True, eq=False)
class CmaState:
    dist: GaussianParams
    path_c: np.ndarray
    path_sigma: np.ndarray
    gen: int
    params: CmaParams


def initial_state(mean, sigma: float, params: CmaParams | None = None,
                  cov=None) -> CmaState:
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[0]
    params = params or default_params(n)
    if params.dim != n:
        raise ValueError("params dimension does not match the mean")
    cov = np.eye(n) if cov is None else cov
    dist = GaussianParams(mean, sigma, cov, stamp=0)
    return CmaState(dist, np.zeros(n), np.zeros(n), 0, params)


def rank_order(values) -> np.ndarray:
    """Indices sorting ``values`` best (smallest) first.

    The sort is stable, so ties keep evaluation order; NaN and +-inf that are
    not finite rank after every finite value and tie among themselves.
    """
    values = np.asarray(values, dtype=float)
    keyed = np.where(np.isfinite(values), values, np.inf)
    return np.argsort(keyed, kind="stable")


@dataclass(frozen=True, eq=False)
class RankedPopulation:
    points: np.ndarray
    order: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        order = np.asarray(self.order)
        if points.ndim != 2:
            raise ValueError("points must be a 2-D array")
        lam = points.shape[0]
        if order.shape != (lam,) or not np.array_equal(np.sort(order), np.arange(lam)):
            raise ValueError("order must be a permutation of range(len(points))")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "order", order)

    @classmethod
    def from_values(cls, points, values) -> RankedPopulation:
        return cls(points, rank_order(values))

    @classmethod
    def from_scores(cls, points, scores) -> RankedPopulation:
        """Rank by a score where larger is better (surrogate output)."""
        return cls(points, rank_order(-np.asarray(scores, dtype=float)))


def ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    """Sample ``lambda`` candidates as rows of an array."""
    return sample(state.dist, state.params.lam, rng)


def tell(state: CmaState, pop: RankedPopulation) -> CmaState:
    """Update the search distribution from a ranked population."""
    p = state.params
    dist = state.dist
    n = dist.dim
    if pop.points.shape != (p.lam, n):
        raise ValueError(
            f"population shape {pop.points.shape} does not match "
            f"(lambda, n) = {(p.lam, n)}"
        )
    selected = pop.points[pop.order[: p.mu]]
    if not np.all(np.isfinite(selected)):
        raise ValueError("selected points contain non-finite coordinates")

    sigma = dist.sigma
    if sigma == 0:
        return replace(state, gen=state.gen + 1)
    old_mean = dist.mean
    y = (selected - old_mean) / sigma
    step = p.weights @ y
    mean = old_mean + sigma * step

    eig = dist.eigen
    inv_sqrt_step = eig.basis @ ((eig.basis.T @ step) / eig.scales)
    ps = (1 - p.csigma) * state.path_sigma + math.sqrt(
        p.csigma * (2 - p.csigma) * p.mueff
    ) * inv_sqrt_step
    ps_norm = float(np.linalg.norm(ps))
    gen = state.gen + 1
    hsig = ps_norm / math.sqrt(1 - (1 - p.csigma) ** (2 * gen)) < (
        1.4 + 2 / (n + 1)
    ) * p.chi_n
    pc = (1 - p.cc) * state.path_c
    if hsig:
        pc = pc + math.sqrt(p.cc * (2 - p.cc) * p.mueff) * step

    cov = dist.cov
    rank_mu = (y.T * p.weights) @ y
    decay = 1 - p.c1 - p.cmu
    if not hsig:
        decay += p.c1 * p.cc * (2 - p.cc)
    cov = decay * cov + p.c1 * np.outer(pc, pc) + p.cmu * rank_mu

    sigma = sigma * math.exp(min(1.0, (p.csigma / p.dsigma) * (ps_norm / p.chi_n - 1)))
    sigma, cov, pc = _rebalance(sigma, cov, pc)
    new_dist = GaussianParams(mean, sigma, cov, stamp=dist.stamp + 1)
    return CmaState(new_dist, pc, ps, gen, p)


def _rebalance(sigma, cov, pc, band=1e6):
    """Move the overall scale of ``cov`` into ``sigma`` when it drifts far from 1.

    ``(sigma, cov, pc) -> (k sigma, cov / k**2, pc / k)`` leaves the search
    distribution and all later updates unchanged; it only keeps the floats in
    range when the step size and the covariance scale drift apart.
    """
    scale = float(np.trace(cov)) / cov.shape[0]
    if 1 / band <= scale <= band or not math.isfinite(scale) or scale <= 0:
        return sigma, cov, pc
    k = math.sqrt(scale)
    return sigma * k, cov / scale, pc / k


def with_population(state: CmaState, lam: int) -> CmaState:
    """Same state with parameters re-derived for population size ``lam``."""
    if lam == state.params.lam:
        return state
    return replace(state, params=default_params(state.dist.dim, lam))


def with_sample_size(state: CmaState, lam: int) -> CmaState:
    """Same state sampling ``lam`` candidates but keeping ``mu``, the weights
    and the learning rates, so only the selection pressure changes."""
    if lam < state.params.mu:
        raise ValueError(f"population size {lam} is smaller than mu = {state.params.mu}")
    return replace(state, params=replace(state.params, lam=int(lam)))


def stall_window(params: CmaParams) -> int:
    return 10 + math.ceil(30 * params.dim / params.lam)


def should_restart(state: CmaState, history=(), tolfun: float = TOL_FUN) -> bool:
    """Stagnation test: step size collapse, ill-conditioning or flat progress.

    ``history`` holds the best objective value of each past generation.
    """
    eig = state.dist.eigen
    if state.dist.sigma * float(eig.scales.max()) < TOL_SIGMA:
        return True
    if eig.condition > TOL_CONDITION:
        return True
    window = stall_window(state.params)
    if len(history) >= window:
        recent = np.asarray(history[-window:], dtype=float)
        if np.all(np.isfinite(recent)) and np.ptp(recent) < tolfun:
            return True
    return False


class CMAES(BaseEstimator):
    """Plain CMA-ES with increasing-population restarts.

    Parameters
    ----------
    sigma0 : float
        Initial step size.
    popsize : int or None
        Initial population size; the default depends on the dimension.
    restarts : int
        Maximum number of restarts, each doubling the population size.
    tolfun : float
        Range of per-generation best values below which a run is restarted.
    init_low, init_high : float
        Box in which the initial mean of every restart is drawn uniformly.
    """

    def __init__(self, sigma0=2.0, popsize=None, restarts=9, tolfun=TOL_FUN,
                 init_low=-5.0, init_high=5.0):
        self.sigma0 = sigma0
        self.popsize = popsize
        self.restarts = restarts
        self.tolfun = tolfun
        self.init_low = init_low
        self.init_high = init_high

    def minimize(self, objective, dim, budget, target=-math.inf,
                 random_state=None, keep_points=False) -> RunRecord:
        rng = np.random.default_rng(random_state)
        evaluator = Evaluator(objective, budget, target, keep_points=keep_points)
        lam = self.popsize or default_params(dim).lam
        restarts = 0
        termination = "failure"
        try:
            while True:
                mean = rng.uniform(self.init_low, self.init_high, dim)
                state = initial_state(mean, self.sigma0, default_params(dim, lam))
                history = []
                while not should_restart(state, history, self.tolfun):
                    X = ask(state, rng)
                    values = evaluator(X)
                    state = tell(state, RankedPopulation.from_values(X, values))
                    history.append(float(np.min(np.where(np.isfinite(values), values, np.inf))))
                if restarts >= self.restarts:
                    break
                restarts += 1
                lam *= 2
        except StopRun as stop:
            termination = stop.reason
        self.evaluator_ = evaluator
        return evaluator.record("cmaes", termination, dim=dim, restarts=restarts)
