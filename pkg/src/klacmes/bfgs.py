"""Finite-difference BFGS baseline.

Gradients are forward differences, so every gradient costs ``n`` true
evaluations on top of the one at the current point; all of them count
against the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .records import Evaluator, RunRecord, StopRun

__all__ = ["BfgsConfig", "LineSearchFailure", "fd_gradient", "line_search", "minimize", "BFGS"]


@dataclass(frozen=True)
class BfgsConfig:
    fd_step: float = 1e-8
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_steps: int = 30
    restart_on_failure: bool = True
    init_low: float = -5.0
    init_high: float = 5.0

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.max_line_steps < 1:
            raise ValueError("max_line_steps must be >= 1")


class LineSearchFailure(Exception):
    """No step satisfying the strong Wolfe conditions was found."""


def fd_gradient(f, x, fx, step):
    """Forward-difference gradient of ``f`` at ``x`` given ``fx = f(x)``.

    The step is relative for coordinates larger than one in magnitude.
    """
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        xi = x.copy()
        xi[i] += step * max(1.0, abs(x[i]))
        grad[i] = (f(xi) - fx) / (xi[i] - x[i])
    return grad


def line_search(phi, phi0, dphi0, cfg: BfgsConfig, alpha1=1.0):
    """Strong-Wolfe line search (bracketing and zoom).

    ``phi(alpha)`` returns ``(value, slope, payload)``.  Returns the accepted
    ``(alpha, value, payload)``; raises :class:`LineSearchFailure` when the
    step budget runs out or the slope is not a descent direction.
    """
    if not dphi0 < 0:
        raise LineSearchFailure("not a descent direction")
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2
    steps = 0

    def zoom(lo, hi):
        nonlocal steps
        a_lo, f_lo, d_lo = lo
        a_hi, f_hi, _ = hi
        while steps < cfg.max_line_steps:
            # Safeguarded quadratic interpolation from the low end.
            denom = 2 * (f_hi - f_lo - d_lo * (a_hi - a_lo))
            a = a_lo - d_lo * (a_hi - a_lo) ** 2 / denom if denom > 0 else 0.5 * (a_lo + a_hi)
            margin = 0.1 * abs(a_hi - a_lo)
            a = min(max(a, min(a_lo, a_hi) + margin), max(a_lo, a_hi) - margin)
            steps += 1
            f_a, d_a, payload = phi(a)
            if not (math.isfinite(f_a) and math.isfinite(d_a)):
                a_hi, f_hi = a, math.inf
            elif f_a > phi0 + c1 * a * dphi0 or f_a >= f_lo:
                a_hi, f_hi = a, f_a
            else:
                if abs(d_a) <= -c2 * dphi0:
                    return a, f_a, payload
                if d_a * (a_hi - a_lo) >= 0:
                    a_hi, f_hi = a_lo, f_lo
                a_lo, f_lo, d_lo = a, f_a, d_a
            if a_lo == a_hi:
                break
        raise LineSearchFailure("zoom did not converge")

    prev = (0.0, phi0, dphi0)
    alpha = alpha1
    while steps < cfg.max_line_steps:
        steps += 1
        f_a, d_a, payload = phi(alpha)
        if not (math.isfinite(f_a) and math.isfinite(d_a)):
            alpha = 0.5 * (prev[0] + alpha)
            continue
        if f_a > phi0 + c1 * alpha * dphi0 or (steps > 1 and f_a >= prev[1]):
            return zoom(prev, (alpha, f_a, d_a))
        if abs(d_a) <= -c2 * dphi0:
            return alpha, f_a, payload
        if d_a >= 0:
            return zoom((alpha, f_a, d_a), prev)
        prev = (alpha, f_a, d_a)
        alpha *= 2.0
    raise LineSearchFailure("no acceptable step within max_line_steps")


def _bfgs_from(evaluate, x, cfg: BfgsConfig):
    """BFGS iterations from ``x`` until a line search fails (StopRun ends the run)."""
    n = x.shape[0]
    fx = evaluate(x)
    g = fd_gradient(evaluate, x, fx, cfg.fd_step)
    H = np.eye(n)
    scaled = False
    while True:
        if not np.all(np.isfinite(g)) or not np.any(g):
            return
        d = -H @ g
        slope = float(g @ d)
        if not slope < 0:
            H = np.eye(n)
            scaled = False
            d = -g
            slope = float(g @ d)

        def phi(alpha, x=x, d=d):
            xa = x + alpha * d
            fa = evaluate(xa)
            ga = fd_gradient(evaluate, xa, fa, cfg.fd_step)
            return fa, float(ga @ d), (xa, ga)

        alpha1 = 1.0 if scaled else min(1.0, 1.0 / float(np.linalg.norm(g)))
        try:
            _, fx, (x_new, g_new) = line_search(phi, fx, slope, cfg, alpha1)
        except LineSearchFailure:
            return
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            if not scaled:
                # Usual initial scaling of the inverse Hessian before the first update.
                H = (sy / float(y @ y)) * np.eye(n)
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (
                np.outer(Hy, s) + np.outer(s, Hy)
            )
            H = 0.5 * (H + H.T)
        x, g = x_new, g_new


def minimize(objective, x0, cfg: BfgsConfig | None = None, budget: int = 10_000,
             target: float = -math.inf, rng=None) -> RunRecord:
    """Run BFGS from ``x0``, restarting uniformly in the box after line-search failures."""
    cfg = cfg or BfgsConfig()
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    if budget < n + 1:
        raise ValueError(f"budget {budget} does not cover one gradient ({n + 1} evaluations)")
    rng = np.random.default_rng(rng)
    evaluator = Evaluator(objective, budget, target)
    evaluate = evaluator.evaluate_one
    restarts = 0
    termination = "failure"
    x = x0
    try:
        while True:
            _bfgs_from(evaluate, x, cfg)
            if not cfg.restart_on_failure:
                break
            restarts += 1
            x = rng.uniform(cfg.init_low, cfg.init_high, n)
    except StopRun as stop:
        termination = stop.reason
    return evaluator.record("bfgs", termination, dim=n, restarts=restarts)


class BFGS(BaseEstimator):
    """Finite-difference BFGS with uniform random starts.

    Parameters
    ----------
    fd_step : float
        Forward-difference step of the gradient estimate.
    wolfe_c1, wolfe_c2 : float
        Sufficient-decrease and curvature constants of the line search.
    max_line_steps : int
        Trial steps per line search before declaring failure.
    restart_on_failure : bool
        Restart from a uniform point when a line search fails.
    """

    def __init__(self, fd_step=1e-8, wolfe_c1=1e-4, wolfe_c2=0.9, max_line_steps=30,
                 restart_on_failure=True, init_low=-5.0, init_high=5.0):
        self.fd_step = fd_step
        self.wolfe_c1 = wolfe_c1
        self.wolfe_c2 = wolfe_c2
        self.max_line_steps = max_line_steps
        self.restart_on_failure = restart_on_failure
        self.init_low = init_low
        self.init_high = init_high

    @property
    def config(self) -> BfgsConfig:
        return BfgsConfig(**self.get_params())

    def minimize(self, objective, dim, budget, target=-math.inf,
                 random_state=None, keep_points=False) -> RunRecord:
        rng = np.random.default_rng(random_state)
        x0 = rng.uniform(self.init_low, self.init_high, dim)
        return minimize(objective, x0, self.config, budget, target, rng)
