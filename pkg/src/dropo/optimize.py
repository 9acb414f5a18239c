"""Fitting dynamics distributions with CMA-ES.

The search runs in a normalized box ``[0, 4]^(2d)``: means map linearly from
the search bounds, standard deviations map logarithmically from
``[std_min, std_max]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cmaes import CmaesState, cmaes_minimize, default_popsize
from .core import DynamicsDistribution, FitResult, ParameterSpace, TransitionDataset
from .likelihood import (STREAM_OPTIMIZER, STREAM_TRACE, LikelihoodConfig, LikelihoodError,
                         dataset_log_likelihood, dataset_mse, derived_rng, squared_errors)
from .sim import Simulator

log = logging.getLogger(__name__)

BOX = 4.0
OBJECTIVES = ("dropo", "droid")
SAMPLE_SETS = ("fixed", "generation", "evaluation")


def _check_space(space: ParameterSpace) -> None:
    if np.any(space.upper <= space.lower) or np.any(space.std_max <= space.std_min):
        raise ValueError("degenerate normalization bounds")


def normalize_phi(phi: DynamicsDistribution) -> np.ndarray:
    """Map ``(mean, std)`` to ``z`` in ``[0, 4]^(2d)``, means first."""
    space = phi.space
    _check_space(space)
    zm = BOX * (phi.mean - space.lower) / (space.upper - space.lower)
    log_min = np.log(space.std_min)
    zs = BOX * (np.log(phi.std) - log_min) / (np.log(space.std_max) - log_min)
    return np.concatenate([zm, zs])


def denormalize_phi(z, space: ParameterSpace) -> DynamicsDistribution:
    """Inverse of :func:`normalize_phi`; ``z`` is clamped to the box first."""
    _check_space(space)
    z = np.clip(np.asarray(z, dtype=float), 0.0, BOX)
    d = space.dim
    if z.size != 2 * d:
        raise ValueError(f"expected {2 * d} normalized coordinates, got {z.size}")
    mean = space.lower + z[:d] / BOX * (space.upper - space.lower)
    log_min = np.log(space.std_min)
    std = np.exp(log_min + z[d:] / BOX * (np.log(space.std_max) - log_min))
    return DynamicsDistribution(space, mean, std)


def normalize_means(mean, space: ParameterSpace) -> np.ndarray:
    return BOX * (np.asarray(mean, dtype=float) - space.lower) / (space.upper - space.lower)


def denormalize_means(z, space: ParameterSpace) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=float), 0.0, BOX)
    return space.lower + z / BOX * (space.upper - space.lower)


@dataclass(frozen=True)
class FitConfig:
    """Settings for one fit.

    ``phi_init`` defaults to the centre of the search box with stds at the
    geometric mean of their bounds.

    ``sample_sets`` controls how often the dynamics sample set is redrawn:
    once per fit (``"fixed"``), once per optimizer generation or once per
    objective evaluation. Redrawing makes the objective noisy, and the
    best-so-far candidate then tends to be one whose draw happened to be
    favourable, which biases stds upwards.
    """

    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    objective: str = "dropo"
    budget: int = 3000
    stagnation_generations: int = 20
    stagnation_tol: float = 1e-8
    phi_init: DynamicsDistribution | None = None
    sigma0: float = 1.0
    popsize: int | None = None
    track_mse: bool = False
    restarts: int = 0
    sample_sets: str = "fixed"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.sample_sets not in SAMPLE_SETS:
            raise ValueError(f"unknown sample_sets {self.sample_sets!r}; choose from {SAMPLE_SETS}")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")

    def with_epsilon(self, epsilon) -> "FitConfig":
        return replace(self, likelihood=replace(self.likelihood, epsilon=epsilon))


def _initial(sim: Simulator, cfg: FitConfig) -> DynamicsDistribution:
    space = sim.param_space
    phi = cfg.phi_init if cfg.phi_init is not None else space.midpoint()
    if phi.space.names != space.names:
        raise ValueError(f"initial guess covers {phi.space.names}, simulator optimizes "
                         f"{space.names}")
    if np.any(phi.mean < space.lower) or np.any(phi.mean > space.upper):
        raise ValueError("initial means lie outside the search space")
    if np.any(phi.std < space.std_min) or np.any(phi.std > space.std_max):
        raise ValueError("initial stds lie outside [std_min, std_max]")
    return DynamicsDistribution(space, phi.mean, phi.std)


def _run(objective, x0, cfg: FitConfig, seed: int, callback=None):
    rng = derived_rng(seed, STREAM_OPTIMIZER)
    return cmaes_minimize(objective, x0, cfg.sigma0, cfg.budget, rng, bounds=(0.0, BOX),
                          popsize=cfg.popsize,
                          stagnation_generations=cfg.stagnation_generations,
                          stagnation_tol=cfg.stagnation_tol, callback=callback,
                          restarts=cfg.restarts)


def fit_dropo(dataset: TransitionDataset, sim: Simulator, cfg: FitConfig) -> FitResult:
    """Maximize the dataset log-likelihood over means and stds."""
    lcfg = cfg.likelihood
    space = sim.param_space
    x0 = normalize_phi(_initial(sim, cfg))
    popsize = cfg.popsize or default_popsize(x0.size)
    counter = [0]

    def objective(z):
        k = counter[0]
        counter[0] += 1
        phi = denormalize_phi(z, space)
        generation = k // popsize
        draw = {"fixed": 0, "generation": generation, "evaluation": k}[cfg.sample_sets]
        try:
            return -dataset_log_likelihood(phi, dataset, sim, lcfg, evaluation=draw)
        except LikelihoodError as exc:
            raise LikelihoodError(f"generation {generation}, candidate {k % popsize} (mean "
                                  f"{phi.mean.tolist()}, std {phi.std.tolist()}): {exc}",
                                  exc.transition) from exc

    mse_trace: list[float] = []

    def track(state: CmaesState):
        if cfg.track_mse and state.best_x is not None:
            phi = denormalize_phi(state.best_x, space)
            mse_trace.append(dataset_mse(phi, dataset, sim, lcfg,
                                         evaluation=state.generation + (1 << 20)))

    res = _run(objective, x0, replace(cfg, popsize=popsize), lcfg.seed, track)
    phi_star = denormalize_phi(res.x, space)
    log.info("dropo fit: %d evaluations, stop=%s, -L=%.6g", res.evaluations, res.stop, res.f)
    return FitResult(phi_star=phi_star, objective_trace=list(res.trace),
                     mse=dataset_mse(phi_star, dataset, sim, lcfg),
                     epsilon=lcfg.epsilon_vector(_reduced_dim(dataset, lcfg)),
                     evaluations=res.evaluations, seed=lcfg.seed, objective="dropo",
                     mse_trace=mse_trace, n_transitions=len(dataset), stop=res.stop)


def _reduced_dim(dataset: TransitionDataset, lcfg: LikelihoodConfig) -> int:
    return dataset.state_dim - 3 * len(lcfg.orientation_slots)


def droid_objective(mean, dataset: TransitionDataset, sim: Simulator,
                    lcfg: LikelihoodConfig) -> float:
    """Summed squared replay error with the dynamics fixed at ``mean``."""
    space = sim.param_space
    phi = DynamicsDistribution(space, mean, np.full(space.dim, space.std_min))
    errors = squared_errors(phi, dataset, sim, lcfg, samples=np.asarray(mean)[None, :])
    total = 0.0
    for value in errors.sum(axis=1):
        total += value
    return float(total)


def fit_droid_baseline(dataset: TransitionDataset, sim: Simulator, cfg: FitConfig) -> FitResult:
    """Means-only L2 fit; the reported stds are the optimizer's own spread.

    The final CMA-ES marginal standard deviations are scaled from the
    normalized box back to physical units and may fall below ``std_min``.
    """
    lcfg = cfg.likelihood
    space = sim.param_space
    x0 = normalize_means(_initial(sim, cfg).mean, space)
    mse_trace: list[float] = []

    def objective(z):
        return droid_objective(denormalize_means(z, space), dataset, sim, lcfg)

    def track(state: CmaesState):
        if cfg.track_mse and state.best_x is not None:
            mse_trace.append(objective(state.best_x))

    res = _run(objective, x0, cfg, lcfg.seed, track)
    scale = (space.upper - space.lower) / BOX
    phi_star = DynamicsDistribution(space, denormalize_means(res.x, space),
                                    res.state.marginal_std() * scale)
    log.info("droid fit: %d evaluations, stop=%s, L2=%.6g", res.evaluations, res.stop, res.f)
    return FitResult(phi_star=phi_star, objective_trace=list(res.trace),
                     mse=dataset_mse(phi_star, dataset, sim, lcfg),
                     epsilon=lcfg.epsilon_vector(_reduced_dim(dataset, lcfg)),
                     evaluations=res.evaluations, seed=lcfg.seed, objective="droid",
                     mse_trace=mse_trace, n_transitions=len(dataset), stop=res.stop)


def fit(dataset: TransitionDataset, sim: Simulator, cfg: FitConfig) -> FitResult:
    if cfg.objective == "droid":
        return fit_droid_baseline(dataset, sim, cfg)
    return fit_dropo(dataset, sim, cfg)


@dataclass
class EpsilonSweep:
    """Outcome of an epsilon sweep; ``selected`` is None when no candidate meets tau."""

    selected: float | None
    tau: float
    epsilons: list[float]
    total_variance: list[float]
    mse: list[float]
    results: list[FitResult]

    @property
    def reachable(self) -> bool:
        return self.selected is not None

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.epsilons, self.total_variance, self.mse))


def tune_epsilon(dataset: TransitionDataset, sim: Simulator, cfg: FitConfig,
                 candidates: Sequence[float], tau: float) -> EpsilonSweep:
    """Fit once per candidate and pick the smallest epsilon whose MSE is below ``tau``."""
    candidates = [float(e) for e in candidates]
    if not candidates:
        raise ValueError("no epsilon candidates")
    if any(e < 0 for e in candidates):
        raise ValueError("epsilon candidates must be non-negative")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    results = []
    for eps in candidates:
        results.append(fit_dropo(dataset, sim, cfg.with_epsilon(eps)))
        log.info("epsilon %.3g: total variance %.4g, mse %.4g", eps,
                 results[-1].phi_star.total_variance, results[-1].mse)
    passing = [e for e, r in zip(candidates, results) if r.mse < tau]
    return EpsilonSweep(selected=min(passing) if passing else None, tau=float(tau),
                        epsilons=candidates,
                        total_variance=[r.phi_star.total_variance for r in results],
                        mse=[r.mse for r in results], results=results)
