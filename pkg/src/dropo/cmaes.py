"""(mu/mu_w, lambda)-CMA-ES with box handling by resampling.

Strategy parameters follow the standard defaults: population
``4 + floor(3 ln n)``, log-linear positive recombination weights, rank-one and
rank-mu covariance updates and cumulative step-size adaptation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MAX_RESAMPLES = 100
MAX_CONDITION = 1e14


class OptimizationError(RuntimeError):
    pass


def default_popsize(n: int) -> int:
    return 4 + int(3 * math.log(n))


@dataclass
class CmaesState:
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    popsize: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    generation: int = 0
    best_x: np.ndarray | None = None
    best_f: float = math.inf
    B: np.ndarray = field(default=None, repr=False)
    D: np.ndarray = field(default=None, repr=False)

    @classmethod
    def initial(cls, x0, sigma0: float, popsize: int | None = None) -> "CmaesState":
        x0 = np.array(x0, dtype=float).reshape(-1)
        n = x0.size
        lam = popsize or default_popsize(n)
        mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        w /= w.sum()
        mu_eff = 1.0 / np.sum(w ** 2)
        c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
        d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
        c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
        c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
        c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))
        return cls(mean=x0, sigma=float(sigma0), C=np.eye(n), p_sigma=np.zeros(n),
                   p_c=np.zeros(n), popsize=lam, weights=w, mu_eff=mu_eff, c_sigma=c_sigma,
                   d_sigma=d_sigma, c_c=c_c, c_1=c_1, c_mu=c_mu, chi_n=chi_n,
                   B=np.eye(n), D=np.ones(n))

    @property
    def dim(self) -> int:
        return self.mean.size

    def marginal_std(self) -> np.ndarray:
        """Per-coordinate standard deviation of the current search distribution."""
        return self.sigma * np.sqrt(np.diag(self.C))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        return self.mean + self.sigma * (self.B @ (self.D * z))

    def update(self, steps: np.ndarray) -> None:
        """Adapt mean, paths, covariance and step size from sorted steps.

        ``steps`` holds ``(x_i - mean) / sigma`` for the best ``mu``
        candidates, best first.
        """
        n = self.dim
        y_w = self.weights @ steps
        self.mean = self.mean + self.sigma * y_w
        inv_sqrt = self.B @ np.diag(1 / self.D) @ self.B.T
        cs = self.c_sigma
        self.p_sigma = (1 - cs) * self.p_sigma + math.sqrt(cs * (2 - cs) * self.mu_eff) * (inv_sqrt @ y_w)
        norm_ps = float(np.linalg.norm(self.p_sigma))
        decay = 1 - (1 - cs) ** (2 * (self.generation + 1))
        h_sigma = norm_ps / math.sqrt(decay) / self.chi_n < 1.4 + 2 / (n + 1)
        cc = self.c_c
        self.p_c = (1 - cc) * self.p_c + h_sigma * math.sqrt(cc * (2 - cc) * self.mu_eff) * y_w
        rank_mu = (steps * self.weights[:, None]).T @ steps
        rank_one = np.outer(self.p_c, self.p_c) + (not h_sigma) * cc * (2 - cc) * self.C
        self.C = (1 - self.c_1 - self.c_mu) * self.C + self.c_1 * rank_one + self.c_mu * rank_mu
        self.C = 0.5 * (self.C + self.C.T)
        self.sigma *= math.exp((cs / self.d_sigma) * (norm_ps / self.chi_n - 1))
        eig, B = np.linalg.eigh(self.C)
        if not eig[0] > 0:
            raise OptimizationError(f"covariance lost positive definiteness at generation "
                                    f"{self.generation} (min eigenvalue {eig[0]:.3e})")
        self.B, self.D = B, np.sqrt(eig)
        self.generation += 1


@dataclass
class CmaesResult:
    x: np.ndarray
    f: float
    trace: list[float]
    evaluations: int
    generations: int
    stop: str
    state: CmaesState
    restarts: int = 0


def _in_box(x, lower, upper) -> bool:
    return lower is None or bool(np.all(x >= lower) and np.all(x <= upper))


def cmaes_minimize(objective: Callable[[np.ndarray], float], x0, sigma0: float, budget: int,
                   rng: np.random.Generator, bounds=None, popsize: int | None = None,
                   stagnation_generations: int = 20, stagnation_tol: float = 1e-8,
                   callback: Callable[[CmaesState], None] | None = None,
                   restarts: int = 0) -> CmaesResult:
    """Minimize ``objective`` within ``budget`` evaluations.

    Parameters
    ----------
    bounds : (lower, upper) or None
        Box for the search. Out-of-box candidates are redrawn up to 100
        times, then clamped and charged a quadratic penalty.
    stagnation_generations, stagnation_tol
        Stop once the best value improved by less than ``stagnation_tol``
        over that many generations. A non-positive tolerance disables the
        rule.
    callback
        Called with the state after every generation.
    restarts
        How many times a run that stopped early may start over from the best
        point with step size ``sigma0`` and identity covariance, while
        budget remains.

    Notes
    -----
    A run also ends once the condition number of ``C`` exceeds
    ``MAX_CONDITION``, before round-off can break its positive definiteness.
    Objective values that are not finite rank behind every finite one; a
    generation with no finite value aborts the run.
    """
    state = CmaesState.initial(x0, sigma0, popsize)
    n, lam = state.dim, state.popsize
    if budget < lam:
        raise ValueError(f"budget {budget} is smaller than the population size {lam}")
    lower = upper = None
    if bounds is not None:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (n,))
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (n,))
        if not np.all(lower < upper):
            raise ValueError("degenerate bounds")
    evaluations = 0
    trace: list[float] = []
    stop = "budget"
    used = 0
    while True:
        stop, evaluations = _generations(objective, state, rng, lower, upper, budget,
                                         evaluations, trace, stagnation_generations,
                                         stagnation_tol, callback)
        if stop == "budget" or used >= restarts or evaluations + lam > budget:
            break
        used += 1
        fresh = CmaesState.initial(state.best_x, sigma0, popsize)
        fresh.best_x, fresh.best_f, fresh.generation = state.best_x, state.best_f, state.generation
        state = fresh
    if state.best_x is None:
        raise OptimizationError("no in-bounds candidate produced a finite objective value")
    return CmaesResult(state.best_x, state.best_f, trace, evaluations, state.generation, stop,
                       state, used)


def _generations(objective, state: CmaesState, rng, lower, upper, budget, evaluations, trace,
                 stagnation_generations, stagnation_tol, callback) -> tuple[str, int]:
    n, lam, mu = state.dim, state.popsize, state.weights.size
    start = len(trace)
    while evaluations + lam <= budget:
        xs = np.empty((lam, n))
        fs = np.empty(lam)
        for i in range(lam):
            x = state.sample(rng)
            for _ in range(MAX_RESAMPLES):
                if _in_box(x, lower, upper):
                    break
                x = state.sample(rng)
            xs[i] = x
            point = x if _in_box(x, lower, upper) else np.clip(x, lower, upper)
            f = float(objective(point))
            evaluations += 1
            if np.isfinite(f) and f < state.best_f:
                state.best_f, state.best_x = f, point.copy()
            fs[i] = f + (1 + abs(f)) * float(np.sum((x - point) ** 2))
        finite = np.isfinite(fs)
        if not finite.any():
            raise OptimizationError(
                f"generation {state.generation}: objective non-finite for all {lam} candidates "
                f"(mean {state.mean.tolist()}, sigma {state.sigma:.3e})")
        order = np.argsort(np.where(finite, fs, np.inf), kind="stable")
        trace.append(state.best_f)
        steps = (xs[order[:mu]] - state.mean) / state.sigma
        state.update(steps)
        if callback is not None:
            callback(state)
        g = len(trace) - start
        if (stagnation_tol > 0 and g > stagnation_generations
                and trace[-1 - stagnation_generations] - trace[-1] < stagnation_tol):
            return "stagnation", evaluations
        if state.D.max() ** 2 > MAX_CONDITION * state.D.min() ** 2:
            return "condition", evaluations
        if state.sigma * state.D.max() < 1e-14 * (1 + float(np.max(np.abs(state.mean)))):
            return "step size", evaluations
    return "budget", evaluations
