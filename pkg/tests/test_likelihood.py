import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from dropo.core import DynamicsDistribution, ParameterSpace, TransitionDataset, build_dataset
from dropo.likelihood import (LikelihoodConfig, LikelihoodError, dataset_log_likelihood,
                              dataset_mse, derived_rng, gaussian_loglik, next_state_stats,
                              replay_samples, sample_dynamics, squared_errors,
                              transition_log_likelihood, transition_terms)
from dropo.sim import DataGenConfig, MassSpringDamper, Simulator, generate_dataset


def _random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_closed_form_cases():
    unit = next_state_stats(np.array([[1.0], [-1.0]]), 0.0)
    assert unit.cov[0, 0] == 2.0
    from dropo.likelihood import NextStateStats
    assert transition_log_likelihood(NextStateStats(np.zeros(1), np.eye(1), 2), [0.0]) == 0.0
    assert transition_log_likelihood(NextStateStats(np.zeros(1), np.eye(1), 2), [2.0]) == -2.0
    diag = NextStateStats(np.array([2.0, 1.0]), np.diag([4.0, 0.25]), 2)
    assert transition_log_likelihood(diag, [0.0, 0.0]) == pytest.approx(-2.5, abs=1e-15)


def test_matches_multivariate_normal_density():
    rng = np.random.default_rng(0)
    from dropo.likelihood import NextStateStats
    for _ in range(200):
        d = int(rng.integers(1, 7))
        cov = _random_spd(rng, d)
        mean, x = rng.normal(size=d), rng.normal(size=d)
        ours = transition_log_likelihood(NextStateStats(mean, cov, 2), x)
        oracle = multivariate_normal(mean, cov).logpdf(x)
        # the dropped constant is -(d/2) ln(2 pi)
        assert abs(ours - (oracle + 0.5 * d * np.log(2 * np.pi))) < 1e-9


def test_stats_small_cases():
    stats = next_state_stats([[1.0], [3.0]], [0.5])
    np.testing.assert_array_equal(stats.mean, [2.0])
    np.testing.assert_array_equal(stats.cov, [[2.5]])
    same = next_state_stats(np.tile([1.0, -2.0], (7, 1)), [1e-3, 2e-3])
    np.testing.assert_array_equal(same.mean, [1.0, -2.0])
    np.testing.assert_array_equal(same.cov, np.diag([1e-3, 2e-3]))


def test_unbiased_covariance_against_direct_sums():
    rng = np.random.default_rng(2)
    x = rng.multivariate_normal([1, 2, 3], _random_spd(rng, 3), size=200)
    stats = next_state_stats(x, 0.0)
    mean = [sum(x[k, i] for k in range(200)) / 200 for i in range(3)]
    direct = np.array([[sum((x[k, i] - mean[i]) * (x[k, j] - mean[j]) for k in range(200)) / 199
                        for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(stats.cov, direct, rtol=1e-12)


def test_singular_covariance_is_an_error():
    stats = next_state_stats(np.ones((5, 2)), 0.0)
    with pytest.raises(LikelihoodError, match="not positive definite"):
        transition_log_likelihood(stats, [1.0, 1.0])


def test_batched_failure_names_transition():
    covs = np.stack([np.eye(2), np.zeros((2, 2)), np.eye(2)])
    with pytest.raises(LikelihoodError) as info:
        gaussian_loglik(np.zeros((3, 2)), covs, np.zeros((3, 2)))
    assert info.value.transition == 1


@given(d=st.integers(1, 4), scale=st.floats(0.01, 10), bump=st.floats(1e-6, 1.0),
       seed=st.integers(0, 10_000))
def test_larger_epsilon_raises_logdet_and_lowers_mahalanobis(d, scale, bump, seed):
    rng = np.random.default_rng(seed)
    samples = rng.normal(scale=scale, size=(10, d))
    x = rng.normal(scale=2 * scale, size=d)
    eps = np.full(d, 1e-3)
    base = next_state_stats(samples, eps)
    i = int(rng.integers(d))
    eps2 = eps.copy()
    eps2[i] += bump
    more = next_state_stats(samples, eps2)

    def parts(stats):
        sign, logdet = np.linalg.slogdet(stats.cov)
        r = stats.mean - x
        return logdet, r @ np.linalg.solve(stats.cov, r)

    (ld1, m1), (ld2, m2) = parts(base), parts(more)
    assert ld2 > ld1
    assert m2 <= m1 * (1 + 1e-9) + 1e-12


@pytest.fixture
def space():
    return ParameterSpace.from_bounds(["a", "b"], [0.5, 1.0], [1.5, 3.0])


def test_truncation_bounds(space):
    phi = DynamicsDistribution(space, [1.0, 2.0], [0.2, 0.3])
    xi = sample_dynamics(phi, 20_000, np.random.default_rng(0))
    assert np.all(np.abs(xi - phi.mean) <= 2 * phi.std)
    tight = DynamicsDistribution(space, [1.0, 2.0], [1e-5, 1e-5])
    assert np.all(np.abs(sample_dynamics(tight, 500, np.random.default_rng(1)) - tight.mean)
                  <= 2e-5)


def test_sample_mean_is_unbiased(space):
    phi = DynamicsDistribution(space, [1.0, 2.0], [0.1, 0.4])
    xi = sample_dynamics(phi, 100_000, np.random.default_rng(3))
    # truncated-at-2-sigma normal variance factor
    from scipy.stats import truncnorm
    se = phi.std * truncnorm(-2, 2).std() / np.sqrt(xi.shape[0])
    assert np.all(np.abs(xi.mean(axis=0) - phi.mean) < 3 * se)


def test_validity_floor_redraws():
    space = ParameterSpace.from_bounds(["m"], [0.01], [1.0], validity_lower=[0.0])
    phi = DynamicsDistribution(space, [0.02], [0.015])
    xi = sample_dynamics(phi, 5000, np.random.default_rng(0))
    assert np.all(xi > 0)
    hopeless = ParameterSpace(["m"], [0.01], [1.0], [0.0], 1e-5, [0.5])
    with pytest.raises(ValueError, match="validity floor"):
        sample_dynamics(DynamicsDistribution(hopeless, [-1.0], [0.1]), 5,
                        np.random.default_rng(0))


def test_derived_streams_are_independent_and_reproducible():
    a = derived_rng(7, 0, 3).normal(size=4)
    np.testing.assert_array_equal(a, derived_rng(7, 0, 3).normal(size=4))
    assert not np.array_equal(a, derived_rng(7, 0, 4).normal(size=4))
    assert not np.array_equal(a, derived_rng(8, 0, 3).normal(size=4))


@pytest.fixture(scope="module")
def msd_data():
    sim = MassSpringDamper()
    data = generate_dataset(DataGenConfig(sim, sim.nominal, transitions=300, trajectories=2,
                                          seed=3))
    return sim, build_dataset(data.trajectories, 1)


def _phi(sim, std=(0.05, 0.5, 0.05)):
    return DynamicsDistribution(sim.param_space, sim.nominal, std)


def test_one_transition_equals_single_term(msd_data):
    sim, ds = msd_data
    one = ds.subset(slice(0, 1))
    cfg = LikelihoodConfig(K=30, epsilon=1e-6, seed=4)
    phi = _phi(sim)
    samples = sample_dynamics(phi, cfg.K, derived_rng(cfg.seed, 0, 0))
    replayed = np.array([sim.replay(one.starts[0], one.actions[0], xi) for xi in samples])
    stats = next_state_stats(replayed, cfg.epsilon)
    assert dataset_log_likelihood(phi, one, sim, cfg) == pytest.approx(
        transition_log_likelihood(stats, one.targets[0]), rel=1e-13)


def test_two_transitions_sum_step_by_step(msd_data):
    sim, ds = msd_data
    two = ds.subset([5, 40])
    cfg = LikelihoodConfig(K=25, epsilon=[1e-6, 1e-5], seed=1)
    phi = _phi(sim)
    samples = sample_dynamics(phi, cfg.K, derived_rng(cfg.seed, 0, 0))
    total = 0.0
    for t in range(2):
        replayed = np.array([sim.replay(two.starts[t], two.actions[t], xi) for xi in samples])
        total += transition_log_likelihood(next_state_stats(replayed, [1e-6, 1e-5]),
                                           two.targets[t])
    assert dataset_log_likelihood(phi, two, sim, cfg) == pytest.approx(total, rel=1e-13)


def test_deterministic_and_worker_independent(msd_data):
    sim, ds = msd_data
    phi = _phi(sim)
    cfg = LikelihoodConfig(K=40, epsilon=1e-6, seed=9)
    base = dataset_log_likelihood(phi, ds, sim, cfg, evaluation=3)
    assert base == dataset_log_likelihood(phi, ds, sim, cfg, evaluation=3)
    for workers in (2, 4):
        wcfg = LikelihoodConfig(K=40, epsilon=1e-6, seed=9, workers=workers)
        assert dataset_log_likelihood(phi, ds, sim, wcfg, evaluation=3) == base
        assert dataset_mse(phi, ds, sim, wcfg) == dataset_mse(phi, ds, sim, cfg)
    assert dataset_log_likelihood(phi, ds, sim, cfg, evaluation=4) != base


def test_sample_permutation_invariance(msd_data):
    sim, ds = msd_data
    cfg = LikelihoodConfig(K=50, epsilon=1e-6)
    phi = _phi(sim)
    samples = sample_dynamics(phi, cfg.K, np.random.default_rng(0))
    perm = np.random.default_rng(1).permutation(cfg.K)
    a = transition_terms(phi, ds, sim, cfg, samples=samples)
    b = transition_terms(phi, ds, sim, cfg, samples=samples[perm])
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_mse_cases(msd_data):
    sim, ds = msd_data
    cfg = LikelihoodConfig(K=20, epsilon=1e-8)
    point = sim.param_space.point(sim.nominal)
    assert dataset_mse(point, ds, sim, cfg) < 1e-10
    shifted = TransitionDataset(1, ds.starts[:1], ds.actions[:1], ds.targets[:1] + [0.5, 0.0])
    exact = sim.param_space.point(sim.nominal)
    samples = np.array(sim.nominal)[None, :]
    err = squared_errors(exact, shifted, sim, cfg, samples=samples)
    assert err.sum() == pytest.approx(0.25, abs=1e-12)


def test_mse_matches_brute_force(msd_data):
    sim, ds = msd_data
    cfg = LikelihoodConfig(K=15, epsilon=1e-8, seed=2)
    phi = _phi(sim)
    samples = sample_dynamics(phi, cfg.K, derived_rng(cfg.seed, 1, 0))
    total = 0.0
    for t in range(0, len(ds), 37):
        mean = np.mean([sim.replay(ds.starts[t], ds.actions[t], xi) for xi in samples], axis=0)
        total += float(np.sum((mean - ds.targets[t]) ** 2))
    picked = ds.subset(slice(0, len(ds), 37))
    assert dataset_mse(phi, picked, sim, cfg) == pytest.approx(total, rel=1e-12)


def test_replay_chunks_match_direct(msd_data):
    sim, ds = msd_data
    samples = sample_dynamics(_phi(sim), 8, np.random.default_rng(0))
    out = replay_samples(ds, sim, samples, workers=3)
    assert out.shape == (len(ds), 8, 2)
    t = len(ds) - 1
    np.testing.assert_array_equal(out[t, 5], sim.replay(ds.starts[t], ds.actions[t], samples[5]))


class _Spinner(Simulator):
    """Rotating body whose state carries a unit quaternion about z."""

    sim_id = "spinner"
    param_names = ("w",)
    nominal = (1.0,)
    positive = ("w",)
    state_names = ("x", "qw", "qx", "qy", "qz")

    def _advance(self, state, action, full):
        w = full[..., 0]
        ang = 2 * np.arctan2(state[..., 4], state[..., 1]) + self.dt * w
        x = state[..., 0] + self.dt * action[..., 0]
        zero = np.zeros_like(ang)
        return np.stack(np.broadcast_arrays(x, np.cos(ang / 2), zero, zero, np.sin(ang / 2)),
                        axis=-1)


def test_orientation_slot_mean_is_zero():
    sim = _Spinner()
    rng = np.random.default_rng(0)
    ang = rng.uniform(0, 1, size=6)
    starts = np.stack([rng.normal(size=6), np.cos(ang / 2), 0 * ang, 0 * ang, np.sin(ang / 2)], 1)
    actions = rng.normal(size=(6, 1, 1))
    targets = sim.replay(starts, actions, [1.02])
    ds = TransitionDataset(1, starts, actions, targets)
    cfg = LikelihoodConfig(K=31, epsilon=1e-6, orientation_slots=(1,))
    phi = DynamicsDistribution(sim.param_space, [1.0], [0.05])
    samples = sample_dynamics(phi, cfg.K, derived_rng(cfg.seed, 0, 0))
    from dropo.preprocess import orientation_residual_states, symmetrize_orientation_samples
    rep, real, idx = orientation_residual_states(replay_samples(ds, sim, samples), targets, (1,))
    sym = symmetrize_orientation_samples(rep, idx)
    assert rep.shape[-1] == 2 and idx == [1]
    assert np.all(sym.mean(axis=1)[:, 1] == 0.0)
    terms = transition_terms(phi, ds, sim, cfg)
    assert np.all(np.isfinite(terms))
