"""Monte Carlo next-state statistics and the Gaussian log-likelihood objective.

For every transition the recorded start state is replayed under K sampled
dynamics; the replayed next states give a sample mean and an
epsilon-regularized unbiased covariance, and the recorded next state is scored
under the resulting Gaussian (constant term dropped).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .core import DynamicsDistribution, TransitionDataset
from .preprocess import orientation_residual_states, symmetrize_orientation_samples
from .sim import Simulator

TRUNCATION = 2.0
MAX_REDRAWS = 100
REPLAY_CHUNK = 128

# spawn-key domains for derived random streams
STREAM_OBJECTIVE = 0
STREAM_MSE = 1
STREAM_OPTIMIZER = 2
STREAM_TRACE = 3


class LikelihoodError(ValueError):
    """Numerical failure while scoring a transition."""

    def __init__(self, message: str, transition: int | None = None):
        super().__init__(message if transition is None else f"transition {transition}: {message}")
        self.transition = transition


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible stream keyed on ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class LikelihoodConfig:
    """Hyperparameters of one likelihood evaluation.

    ``epsilon`` is broadcast to the (possibly orientation-reduced) state
    dimension. ``orientation_slots`` lists the first index of each unit
    quaternion embedded in the state.
    """

    K: int = 100
    epsilon: float | Sequence[float] = 1e-5
    horizon: int = 1
    seed: int = 0
    orientation_slots: tuple[int, ...] = ()
    workers: int = 1

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2 for an unbiased covariance")
        eps = np.asarray(self.epsilon, dtype=float)
        if np.any(eps < 0) or not np.all(np.isfinite(eps)):
            raise ValueError("epsilon must be finite and non-negative")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "orientation_slots", tuple(int(s) for s in self.orientation_slots))

    def epsilon_vector(self, dim: int) -> np.ndarray:
        eps = np.asarray(self.epsilon, dtype=float)
        if eps.ndim and eps.size != dim:
            raise ValueError(f"epsilon has {eps.size} entries, state dimension is {dim}")
        return np.broadcast_to(eps, (dim,)).astype(float)


def sample_dynamics(phi: DynamicsDistribution, K: int, rng: np.random.Generator) -> np.ndarray:
    """Draw K parameter vectors from the truncated normal ``phi``.

    Each coordinate lies within two standard deviations of its mean; rows
    with any value at or below the validity floor are redrawn.

    Returns
    -------
    ndarray, shape (K, d)
    """
    mean, std = phi.mean, phi.std
    floor = phi.space.validity_lower
    hopeless = mean + TRUNCATION * std <= floor
    if np.any(hopeless):
        i = int(np.flatnonzero(hopeless)[0])
        raise ValueError(
            f"truncation region of {phi.space.names[i]} lies entirely at or below its "
            f"validity floor: mean {mean[i]!r} + 2 * std {std[i]!r} <= {floor[i]!r}")
    lo, hi = ndtr(-TRUNCATION), ndtr(TRUNCATION)

    def draw(n):
        z = ndtri(rng.uniform(lo, hi, size=(n, mean.size)))
        return mean + std * np.clip(z, -TRUNCATION, TRUNCATION)

    samples = draw(K)
    for _ in range(MAX_REDRAWS):
        bad = np.any(samples <= floor, axis=1)
        if not bad.any():
            return samples
        samples[bad] = draw(int(bad.sum()))
    raise ValueError(f"could not draw {K} feasible dynamics samples in {MAX_REDRAWS} rounds")


@dataclass(frozen=True)
class NextStateStats:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int


def _stats(samples: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched mean and regularized unbiased covariance over axis -2."""
    K = samples.shape[-2]
    mean = samples.mean(axis=-2)
    centred = samples - mean[..., None, :]
    cov = np.matmul(np.swapaxes(centred, -1, -2), centred) / (K - 1)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mean, cov + np.diag(eps)


def next_state_stats(samples, epsilon) -> NextStateStats:
    """Sample mean and ``Cov + diag(epsilon)`` of replayed next states (K, n)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError("samples must be a (K, n) array")
    if samples.shape[0] < 2:
        raise ValueError("at least two samples are needed for an unbiased covariance")
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float), (samples.shape[1],))
    mean, cov = _stats(samples, eps)
    return NextStateStats(mean, cov, samples.shape[0])


def _diagnose(cov: np.ndarray) -> str:
    if not np.all(np.isfinite(cov)):
        return "covariance has non-finite entries"
    eig = np.linalg.eigvalsh(cov)
    cond = np.inf if eig[0] <= 0 else eig[-1] / eig[0]
    return (f"covariance is not positive definite (eigenvalues {eig[0]:.3e}..{eig[-1]:.3e}, "
            f"condition {cond:.3e}); increase epsilon")


def gaussian_loglik(mean, cov, x) -> np.ndarray:
    """``-0.5 * (log det cov + Mahalanobis^2)`` for stacked (…, n) inputs.

    Uses the Cholesky factor: log det from its diagonal and the Mahalanobis
    term by forward substitution.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    resid = mean - np.asarray(x, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        flat = cov.reshape(-1, *cov.shape[-2:])
        for t, c in enumerate(flat):
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise LikelihoodError(_diagnose(c), t if cov.ndim > 2 else None) from None
        raise
    n = resid.shape[-1]
    y = np.empty_like(resid)
    for i in range(n):
        acc = resid[..., i] - np.einsum("...j,...j->...", chol[..., i, :i], y[..., :i])
        y[..., i] = acc / chol[..., i, i]
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    logdet = 2.0 * np.sum(np.log(diag), axis=-1)
    return -0.5 * (logdet + np.sum(y * y, axis=-1))


def transition_log_likelihood(stats: NextStateStats, s_real) -> float:
    s_real = np.asarray(s_real, dtype=float)
    if s_real.shape != stats.mean.shape:
        raise ValueError(f"state has shape {s_real.shape}, stats have {stats.mean.shape}")
    return float(gaussian_loglik(stats.mean, stats.cov, s_real))


def _check(phi: DynamicsDistribution, dataset: TransitionDataset, sim: Simulator,
           cfg: LikelihoodConfig) -> None:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.state_dim != sim.state_dim or dataset.action_dim != sim.action_dim:
        raise ValueError(
            f"dataset dims (state {dataset.state_dim}, action {dataset.action_dim}) do not "
            f"match {sim.sim_id} (state {sim.state_dim}, action {sim.action_dim})")
    if dataset.horizon != cfg.horizon:
        raise ValueError(f"dataset horizon {dataset.horizon} != configured {cfg.horizon}")
    if phi.space.names != sim.free_names:
        raise ValueError(f"distribution over {phi.space.names} but simulator optimizes "
                         f"{sim.free_names}")


def replay_samples(dataset: TransitionDataset, sim: Simulator, samples: np.ndarray,
                   workers: int = 1) -> np.ndarray:
    """Replay every transition under every sample, shape (T, K, n).

    Work is split into fixed-size chunks of transitions so the arithmetic is
    identical whatever the worker count.
    """
    samples = np.asarray(samples, dtype=float)
    T = len(dataset)
    bounds = [(a, min(a + REPLAY_CHUNK, T)) for a in range(0, T, REPLAY_CHUNK)]

    def run(span):
        a, b = span
        try:
            return sim.replay(dataset.starts[a:b, None, :], dataset.actions[a:b, None, :, :],
                              samples[None, :, :])
        except ValueError as exc:
            raise ValueError(f"replay failed in transitions {a}..{b - 1}: {exc}") from exc

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(span) for span in bounds]
    return np.concatenate(parts, axis=0)


def transition_terms(phi: DynamicsDistribution, dataset: TransitionDataset, sim: Simulator,
                     cfg: LikelihoodConfig, evaluation: int = 0,
                     samples: np.ndarray | None = None) -> np.ndarray:
    """Per-transition log-likelihoods ``L_t``, in transition order.

    One set of K dynamics samples is drawn per evaluation and shared by all
    transitions; ``evaluation`` keys the random stream.
    """
    _check(phi, dataset, sim, cfg)
    if samples is None:
        samples = sample_dynamics(phi, cfg.K, derived_rng(cfg.seed, STREAM_OBJECTIVE, evaluation))
    replayed = replay_samples(dataset, sim, samples, cfg.workers)
    real = dataset.targets
    if cfg.orientation_slots:
        replayed, real, alpha_idx = orientation_residual_states(replayed, real,
                                                               cfg.orientation_slots)
        replayed = symmetrize_orientation_samples(replayed, alpha_idx)
    if not np.all(np.isfinite(replayed)):
        bad = np.flatnonzero(~np.all(np.isfinite(replayed), axis=(1, 2)))
        terms = np.zeros(len(dataset))
        terms[bad] = -np.inf
        good = np.setdiff1d(np.arange(len(dataset)), bad)
        if good.size:
            eps = cfg.epsilon_vector(replayed.shape[-1])
            mean, cov = _stats(replayed[good], eps)
            terms[good] = gaussian_loglik(mean, cov, real[good])
        return terms
    eps = cfg.epsilon_vector(replayed.shape[-1])
    mean, cov = _stats(replayed, eps)
    return gaussian_loglik(mean, cov, real)


def dataset_log_likelihood(phi: DynamicsDistribution, dataset: TransitionDataset,
                           sim: Simulator, cfg: LikelihoodConfig, evaluation: int = 0) -> float:
    """Total log-likelihood of the dataset under ``phi`` (to be maximized)."""
    terms = transition_terms(phi, dataset, sim, cfg, evaluation)
    total = 0.0
    for value in terms:
        total += value
    return float(total)


def replay_means(phi: DynamicsDistribution, dataset: TransitionDataset, sim: Simulator,
                 cfg: LikelihoodConfig, evaluation: int = 0,
                 samples: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """K-sample replay means and the matching recorded states.

    Orientation quaternions are replaced by their angle residual (recorded
    slot 0) without the symmetric duplication, so orientation errors count.
    """
    _check(phi, dataset, sim, cfg)
    if samples is None:
        samples = sample_dynamics(phi, cfg.K, derived_rng(cfg.seed, STREAM_MSE, evaluation))
    replayed = replay_samples(dataset, sim, samples, cfg.workers)
    real = dataset.targets
    if cfg.orientation_slots:
        replayed, real, _ = orientation_residual_states(replayed, real, cfg.orientation_slots)
    return replayed.mean(axis=1), real


def squared_errors(phi, dataset, sim, cfg, evaluation: int = 0, samples=None) -> np.ndarray:
    """Per-transition, per-dimension squared replay errors, shape (T, n)."""
    mean, real = replay_means(phi, dataset, sim, cfg, evaluation, samples)
    return (mean - real) ** 2


def dataset_mse(phi: DynamicsDistribution, dataset: TransitionDataset, sim: Simulator,
                cfg: LikelihoodConfig, evaluation: int = 0) -> float:
    """Sum over transitions of the squared distance between replay mean and record."""
    per_transition = squared_errors(phi, dataset, sim, cfg, evaluation).sum(axis=1)
    total = 0.0
    for value in per_transition:
        total += value
    return float(total)
