"""KL-controlled surrogate relearning schedule for CMA-ES.

An epoch trains a surrogate on points drawn around the current search
distribution, then lets CMA-ES optimize the surrogate until the search
distribution has drifted more than ``kl_thresh`` (in Kullback-Leibler
divergence) from the one the training points came from.  One generation on
the true objective then measures how badly the surrogate ranks the fresh
points, and that error sets the radius of the next epoch:

    ln(kl_thresh) = (tau_err - err) / tau_err * ln_kl_max

where ``err`` is an exponentially smoothed version of the measured error.
The same fresh points drive a one-step CMA-ES over the surrogate's learning
hyper-parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import cma
from .cma import RankedPopulation, ask, tell
from .distribution import GaussianParams, kl_divergence, whiten
from .records import EpochReport, Evaluator, RunRecord, StopRun
from .surrogate import (
    Archive,
    SurrogateHyperParams,
    SurrogateModel,
    SurrogateTrainingError,
    TrainingSet,
    drift_error,
    select_training_set,
    train,
)

__all__ = [
    "ControllerConfig",
    "ControllerState",
    "HyperParamSpace",
    "initial_controller",
    "kl_threshold",
    "update_threshold",
    "epoch_should_end",
    "effective_lambda",
    "fixed_generations",
    "tune_hyperparams",
    "run",
    "KLACMES",
]

logger = logging.getLogger(__name__)

SCHEDULES = ("kl", "fixed-n")

#: Initial hyper-parameters in unit-cube coordinates (q, width, cost); with
#: the default space the width starts at the mean training-pair distance.
HYPER_INIT = (0.5, 1.0, 0.5)

#: Weight of the squared distance outside the unit cube in tuner rankings.
BOX_PENALTY = 1.0


@dataclass(frozen=True)
class ControllerConfig:
    tau_err: float = 0.45
    ln_kl_max: float = 6.0
    boost_threshold: float = 0.35
    boost_factor: int = 100
    alpha_s: float = 0.2
    n_start: int = 10
    err_init: float | None = None
    max_surrogate_generations: int = 1000

    def __post_init__(self):
        if not 0 < self.tau_err < 1:
            raise ValueError("tau_err must lie in (0, 1)")
        if not self.ln_kl_max > 0:
            raise ValueError("ln_kl_max must be positive")
        if not 0 < self.alpha_s <= 1:
            raise ValueError("alpha_s must lie in (0, 1]")
        if self.boost_factor < 1 or self.n_start < 0:
            raise ValueError("boost_factor must be >= 1 and n_start >= 0")

    @property
    def initial_error(self) -> float:
        return self.tau_err if self.err_init is None else self.err_init


@dataclass(frozen=True)
class HyperParamSpace:
    """Box of surrogate hyper-parameters searched by the tuner.

    The tuner works in ``[0, 1]^3`` over ``(q, width, cost_base)``; width and
    cost are mapped on a log scale, ``q`` linearly and rounded.

    With ``relative_width`` the width range is a range of multipliers of the
    mean pairwise whitened distance of the training set, resolved into a
    kernel width by :meth:`resolve` just before training; otherwise it is a
    range of kernel widths.
    """

    q_min: int
    q_max: int
    width_min: float = 0.05
    width_max: float = 1.0
    relative_width: bool = True
    cost_min: float = 1.0
    cost_max: float = 1e6
    cost_growth: float = 1.05
    solver_iters: int | None = None

    @classmethod
    def for_dimension(cls, n: int, **overrides) -> HyperParamSpace:
        lam = 4 + int(math.floor(3 * math.log(n)))
        return cls(q_min=4 * n, q_max=max(4 * n, 2 * lam * 10), **overrides)

    def to_hyper(self, u) -> SurrogateHyperParams:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        q = int(round(self.q_min + u[0] * (self.q_max - self.q_min)))
        width = self.width_min * (self.width_max / self.width_min) ** u[1]
        cost = self.cost_min * (self.cost_max / self.cost_min) ** u[2]
        return SurrogateHyperParams(
            q=max(q, 2),
            width=float(width),
            cost_base=float(cost),
            cost_growth=self.cost_growth,
            solver_iters=self.solver_iters,
        )

    def resolve(self, hp: SurrogateHyperParams, ts: TrainingSet) -> SurrogateHyperParams:
        """Hyper-parameters with the kernel width used to train on ``ts``."""
        if not self.relative_width:
            return hp
        scale = mean_pair_distance(ts)
        if not scale > 0:
            raise SurrogateTrainingError("all training points are identical")
        return replace(hp, width=hp.width * scale)

    def to_unit(self, hp: SurrogateHyperParams) -> np.ndarray:
        span_q = max(self.q_max - self.q_min, 1)
        return np.clip(
            [
                (hp.q - self.q_min) / span_q,
                math.log(hp.width / self.width_min) / math.log(self.width_max / self.width_min),
                math.log(hp.cost_base / self.cost_min) / math.log(self.cost_max / self.cost_min),
            ],
            0.0,
            1.0,
        )


@dataclass(frozen=True)
class ControllerState:
    kl_thresh: float
    err_relaxed: float
    hyper: SurrogateHyperParams
    tuner: cma.CmaState
    epoch_index: int = 0


def kl_threshold(err_relaxed: float, cfg: ControllerConfig) -> float:
    return math.exp((cfg.tau_err - err_relaxed) / cfg.tau_err * cfg.ln_kl_max)


def initial_controller(cfg: ControllerConfig, space: HyperParamSpace,
                       hyper_init=HYPER_INIT, tuner_sigma: float = 0.3) -> ControllerState:
    u0 = np.clip(np.asarray(hyper_init, dtype=float), 0.0, 1.0)
    tuner = cma.initial_state(u0, tuner_sigma)
    err = cfg.initial_error
    return ControllerState(kl_threshold(err, cfg), err, space.to_hyper(u0), tuner)


def update_threshold(state: ControllerState, err_hat: float,
                     cfg: ControllerConfig) -> ControllerState:
    """Smooth the measured drift error and reset the KL radius from it."""
    if not 0 <= err_hat <= 1:
        raise ValueError(f"error rate must lie in [0, 1], got {err_hat}")
    err = (1 - cfg.alpha_s) * state.err_relaxed + cfg.alpha_s * err_hat
    return replace(state, err_relaxed=err, kl_thresh=kl_threshold(err, cfg))


def epoch_should_end(train_dist: GaussianParams, current_dist: GaussianParams,
                     kl_thresh: float) -> bool:
    return kl_divergence(current_dist, train_dist) > kl_thresh


def effective_lambda(err_relaxed: float, base_lambda: int, cfg: ControllerConfig) -> int:
    """Population size for surrogate generations; boosted when the surrogate is accurate."""
    if base_lambda < 2:
        raise ValueError("base_lambda must be >= 2")
    if err_relaxed < cfg.boost_threshold:
        return base_lambda * cfg.boost_factor
    return base_lambda


def fixed_generations(err_relaxed: float, n_max: int) -> int:
    """Surrogate generations of the fixed-length schedule.

    Linear in the error: ``n_max`` at 0 error, 0 at (or above) one half.
    """
    frac = 1.0 - min(max(err_relaxed, 0.0), 0.5) / 0.5
    return int(round(n_max * frac))


def mean_pair_distance(ts: TrainingSet) -> float:
    """Mean Euclidean distance between the whitened training points."""
    w = whiten(ts.source_dist, ts.points)
    sq = np.sum(w * w, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (w @ w.T)
    iu = np.triu_indices(w.shape[0], 1)
    return float(np.mean(np.sqrt(np.maximum(d2[iu], 0.0))))


def _score_candidate(u, pool: TrainingSet, fresh, space: HyperParamSpace) -> float:
    hp = space.to_hyper(u)
    q = min(hp.q, pool.q)
    ts = select_training_set(pool, pool.source_dist, q)
    model = train(ts, space.resolve(hp, ts))
    return drift_error(model, fresh)


def tune_hyperparams(state: ControllerState, prev_set: TrainingSet, fresh,
                     space: HyperParamSpace, rng: np.random.Generator,
                     tuner_sigma: float = 0.3) -> tuple[ControllerState, bool]:
    """One ask/tell of the hyper-parameter CMA-ES.

    Each candidate is scored by the drift error, on ``fresh``, of a surrogate
    trained with it on the points of ``prev_set`` closest to its source
    distribution.  Uses no objective evaluations.  Returns the new state and
    whether every candidate failed to train (in which case nothing changes).
    """
    tuner = state.tuner
    if tuner.dist.sigma == 0:
        return replace(state, epoch_index=state.epoch_index + 1), False
    if _degenerate(tuner):
        # Collapsed tuner: start afresh around the current hyper-parameters.
        tuner = cma.initial_state(tuner.dist.mean, tuner_sigma)
    candidates = ask(tuner, rng)
    inside = np.clip(candidates, 0.0, 1.0)
    errors = np.full(candidates.shape[0], np.inf)
    for i, u in enumerate(inside):
        try:
            errors[i] = _score_candidate(u, prev_set, fresh, space)
        except (SurrogateTrainingError, ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("hyper-parameter candidate %s failed: %s", u, exc)
    if not np.any(np.isfinite(errors)):
        return replace(state, epoch_index=state.epoch_index + 1), True
    # Out-of-box candidates are scored at their clipped image and told
    # unclipped with a quadratic penalty, so the tuner keeps its spread at
    # the boundary.
    errors = errors + BOX_PENALTY * np.sum((candidates - inside) ** 2, axis=1)
    tuner = tell(tuner, RankedPopulation.from_values(candidates, errors))
    hyper = space.to_hyper(tuner.dist.mean)
    return replace(state, tuner=tuner, hyper=hyper, epoch_index=state.epoch_index + 1), False


def _degenerate(state: cma.CmaState) -> bool:
    eig = state.dist.eigen
    return (state.dist.sigma * eig.scales.max() < cma.TOL_SIGMA
            or eig.condition > cma.TOL_CONDITION)


class KLACMES(BaseEstimator):
    """Surrogate-assisted CMA-ES with a KL-controlled relearning schedule.

    Parameters
    ----------
    tau_err, ln_kl_max, boost_threshold, boost_factor, alpha_s, n_start, err_init
        Controller settings, see :class:`ControllerConfig`.
    schedule : {"kl", "fixed-n"}
        ``"kl"`` ends an epoch once the search distribution leaves the KL
        trust region; ``"fixed-n"`` runs a number of surrogate generations
        set linearly from the error, at most ``n_max``.
    sigma0 : float
        Initial step size.
    popsize : int or None
        Initial population size on the true objective.
    restarts : int
        Maximum number of restarts; each doubles the population size and
        keeps the archive and the controller state.
    tuner_sigma : float
        Initial step size of the hyper-parameter CMA-ES in the unit cube.
    hyper_init : sequence of 3 floats
        Initial hyper-parameters in unit-cube coordinates (q, width, cost).
    """

    def __init__(self, tau_err=0.45, ln_kl_max=6.0, boost_threshold=0.35,
                 boost_factor=100, alpha_s=0.2, n_start=10, err_init=None,
                 schedule="kl", n_max=20, sigma0=2.0, popsize=None, restarts=9,
                 tolfun=cma.TOL_FUN, tuner_sigma=0.3, hyper_init=HYPER_INIT,
                 hyper_space=None, max_surrogate_generations=1000,
                 init_low=-5.0, init_high=5.0):
        self.tau_err = tau_err
        self.ln_kl_max = ln_kl_max
        self.boost_threshold = boost_threshold
        self.boost_factor = boost_factor
        self.alpha_s = alpha_s
        self.n_start = n_start
        self.err_init = err_init
        self.schedule = schedule
        self.n_max = n_max
        self.sigma0 = sigma0
        self.popsize = popsize
        self.restarts = restarts
        self.tolfun = tolfun
        self.tuner_sigma = tuner_sigma
        self.hyper_init = hyper_init
        self.hyper_space = hyper_space
        self.max_surrogate_generations = max_surrogate_generations
        self.init_low = init_low
        self.init_high = init_high

    @property
    def config(self) -> ControllerConfig:
        return ControllerConfig(
            tau_err=self.tau_err,
            ln_kl_max=self.ln_kl_max,
            boost_threshold=self.boost_threshold,
            boost_factor=self.boost_factor,
            alpha_s=self.alpha_s,
            n_start=self.n_start,
            err_init=self.err_init,
            max_surrogate_generations=self.max_surrogate_generations,
        )

    @property
    def algorithm_id(self) -> str:
        return "kl-acmes" if self.schedule == "kl" else "fixed-n-acmes"

    def minimize(self, objective, dim, budget, target=-math.inf,
                 random_state=None, keep_points=False) -> RunRecord:
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        cfg = self.config
        rng = np.random.default_rng(random_state)
        space = self.hyper_space or HyperParamSpace.for_dimension(dim)
        base_lam = self.popsize or cma.default_params(dim).lam
        if budget < base_lam * cfg.n_start:
            raise ValueError(
                f"budget {budget} is smaller than the warm-up of "
                f"{base_lam * cfg.n_start} evaluations"
            )
        evaluator = Evaluator(objective, budget, target, keep_points=keep_points)
        archive = Archive(dim)
        ctrl = initial_controller(cfg, space, self.hyper_init, self.tuner_sigma)
        epochs: list[EpochReport] = []
        self.archive_ = archive
        self.epochs_ = epochs

        def true_generation(state):
            X = ask(state, rng)
            first = evaluator.count + 1
            values = np.empty(X.shape[0])
            for i, x in enumerate(X):
                try:
                    values[i] = evaluator.evaluate_one(x)
                except StopRun:
                    done = evaluator.count - first + 1
                    if done > i:
                        values[i] = evaluator.last_value
                    archive.extend(X[:done], values[:done], first)
                    raise
            archive.extend(X, values, first)
            return tell(state, RankedPopulation.from_values(X, values)), X, values

        restarts = 0
        termination = "failure"
        try:
            while True:
                mean = rng.uniform(self.init_low, self.init_high, dim)
                state = cma.initial_state(mean, self.sigma0, cma.default_params(dim, base_lam))
                history = []
                warmup = cfg.n_start if restarts == 0 else 0
                for _ in range(warmup):
                    state, _, values = true_generation(state)
                    history.append(_best(values))
                while not cma.should_restart(state, history, self.tolfun):
                    state, ctrl, report, values = self._epoch(
                        state, ctrl, cfg, space, archive, rng, true_generation, evaluator)
                    epochs.append(report)
                    history.append(_best(values))
                if restarts >= self.restarts:
                    break
                restarts += 1
                base_lam *= 2
        except StopRun as stop:
            termination = stop.reason
        self.controller_ = ctrl
        return evaluator.record(self.algorithm_id, termination, dim=dim,
                                restarts=restarts, epochs=epochs)

    def _epoch(self, state, ctrl, cfg, space, archive, rng, true_generation, evaluator):
        n_pool = min(space.q_max, len(archive))
        pool = select_training_set(archive, state.dist, n_pool)
        hp = ctrl.hyper
        ts = select_training_set(pool, state.dist, min(hp.q, n_pool))
        try:
            model = train(ts, space.resolve(hp, ts))
        except SurrogateTrainingError as exc:
            logger.debug("surrogate training failed: %s", exc)
            return self._plain_epoch(state, ctrl, true_generation, evaluator)
        frozen = state.dist
        base_lam = state.params.lam

        lam = effective_lambda(ctrl.err_relaxed, base_lam, cfg)
        if self.schedule == "kl":
            max_gens = cfg.max_surrogate_generations
        else:
            max_gens = fixed_generations(ctrl.err_relaxed, self.n_max)
        base_params = state.params
        s = cma.with_sample_size(state, lam)
        kl_trace = []
        while len(kl_trace) < max_gens:
            candidate = _surrogate_generation(s, model, rng)
            if candidate is None:
                break
            s = candidate
            kl_trace.append(kl_divergence(s.dist, frozen))
            if self.schedule == "kl" and kl_trace[-1] > ctrl.kl_thresh:
                break
            if _degenerate(s):
                break
        state = replace(s, params=base_params)

        used = evaluator.count
        state, X, values = true_generation(state)
        err = drift_error(model, (X, values))
        ctrl = update_threshold(ctrl, err, cfg)
        ctrl, failed = tune_hyperparams(ctrl, pool, (X, values), space, rng,
                                        self.tuner_sigma)
        report = EpochReport(
            surrogate_generations=len(kl_trace),
            kl_at_exit=kl_trace[-1] if kl_trace else 0.0,
            drift_err=err,
            true_evals_used=evaluator.count - used,
            best_f=evaluator.best_f,
            kl_thresh=ctrl.kl_thresh,
            err_relaxed=ctrl.err_relaxed,
            tuning_failed=failed,
            kl_trace=kl_trace,
        )
        return state, ctrl, report, values

    @staticmethod
    def _plain_epoch(state, ctrl, true_generation, evaluator):
        # No usable surrogate: one true generation, controller untouched.
        used = evaluator.count
        state, _, values = true_generation(state)
        report = EpochReport(
            surrogate_generations=0,
            kl_at_exit=0.0,
            drift_err=math.nan,
            true_evals_used=evaluator.count - used,
            best_f=evaluator.best_f,
            kl_thresh=ctrl.kl_thresh,
            err_relaxed=ctrl.err_relaxed,
            tuning_failed=True,
        )
        return state, ctrl, report, values


def _surrogate_generation(state, model: SurrogateModel, rng):
    X = ask(state, rng)
    scores = model.scores(X)
    try:
        return tell(state, RankedPopulation.from_scores(X, scores))
    except (ValueError, np.linalg.LinAlgError):
        return None


def _best(values) -> float:
    values = np.asarray(values, dtype=float)
    finite = values[np.isfinite(values)]
    return float(finite.min()) if finite.size else math.inf


def run(objective, dim: int, cfg: ControllerConfig | None = None, budget: int = 10_000,
        target: float = -math.inf, rng=None, **kwargs) -> RunRecord:
    """Run KL-controlled surrogate-assisted CMA-ES on ``objective``."""
    cfg = cfg or ControllerConfig()
    opt = KLACMES(
        tau_err=cfg.tau_err,
        ln_kl_max=cfg.ln_kl_max,
        boost_threshold=cfg.boost_threshold,
        boost_factor=cfg.boost_factor,
        alpha_s=cfg.alpha_s,
        n_start=cfg.n_start,
        err_init=cfg.err_init,
        max_surrogate_generations=cfg.max_surrogate_generations,
        **kwargs,
    )
    return opt.minimize(objective, dim, budget, target, random_state=rng)
