import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropo.core import DynamicsDistribution, build_dataset
from dropo.sim import (GRAVITY, DataGenConfig, InvalidParameters, MassChain3, MassSpringDamper,
                       SlidingPuck2D, generate_dataset, inject_misspecification, make_simulator,
                       replay, step)


def test_hand_computed_step():
    sim = MassSpringDamper(dt=0.1)
    x, v = step(sim, [1.0, 0.0], [0.0], [1.0, 1.0, 0.0])
    assert v == pytest.approx(-0.1, abs=1e-15)
    assert x == pytest.approx(0.99, abs=1e-15)


def test_puck_at_rest_stays_put():
    sim = SlidingPuck2D()
    state = np.array([0.3, -0.2, 0.0, 0.0])
    np.testing.assert_array_equal(step(sim, state, [0.0, 0.0], sim.nominal), state)


def test_puck_needs_breakaway_force():
    sim = SlidingPuck2D()
    m, fx, fy = sim.nominal
    below = 0.99 * fx * m * GRAVITY
    np.testing.assert_array_equal(sim.step(np.zeros(4), [below, 0.0], sim.nominal)[2:], 0.0)
    above = sim.step(np.zeros(4), [2 * fx * m * GRAVITY, 0.0], sim.nominal)
    assert above[2] > 0 and above[3] == 0.0


@pytest.mark.parametrize("sim", [MassSpringDamper(), SlidingPuck2D(), MassChain3()],
                         ids=lambda s: s.sim_id)
def test_step_is_deterministic_and_pure(sim):
    rng = np.random.default_rng(3)
    state = rng.normal(size=sim.state_dim)
    actions = rng.normal(size=(4, sim.action_dim))
    first = replay(sim, state, actions, sim.nominal)
    again = replay(sim, state, actions, sim.nominal)
    np.testing.assert_array_equal(first, again)
    sim.step(rng.normal(size=sim.state_dim), actions[0], sim.nominal)
    np.testing.assert_array_equal(replay(sim, state, actions, sim.nominal), first)


def test_replay_composes_steps():
    sim = MassSpringDamper()
    rng = np.random.default_rng(0)
    s0, acts = rng.normal(size=2), rng.normal(size=(3, 1))
    np.testing.assert_array_equal(replay(sim, s0, acts[:1], sim.nominal),
                                  step(sim, s0, acts[0], sim.nominal))
    manual = step(sim, step(sim, step(sim, s0, acts[0], sim.nominal), acts[1], sim.nominal),
                  acts[2], sim.nominal)
    np.testing.assert_array_equal(replay(sim, s0, acts, sim.nominal), manual)


def _puck_oracle(state, actions, m, mu_x, mu_y, dt):
    """Scalar re-integration of the puck written independently of the vectorized model."""
    x, y, vx, vy = state
    for fx, fy in actions:
        out = []
        for v, f, mu in ((vx, fx, mu_x), (vy, fy, mu_y)):
            limit = mu * m * 9.81
            if abs(v) < 1e-6:
                if abs(f) > limit:
                    v = dt * (f - np.copysign(limit, f)) / m
                else:
                    v = 0.0
            else:
                new = v + dt * (f - np.copysign(limit, v)) / m
                if np.sign(new) != np.sign(v) and abs(f) <= limit:
                    new = 0.0
                v = new
            out.append(v)
        vx, vy = out
        x, y = x + dt * vx, y + dt * vy
    return np.array([x, y, vx, vy])


def test_puck_five_step_replay_matches_oracle():
    sim = SlidingPuck2D()
    params = [0.7, 0.15, 0.3]
    actions = np.array([[4.0, -0.5], [0.0, 0.0], [0.5, 3.0], [-3.0, 0.2], [0.0, 0.0]])
    start = np.array([0.1, 0.2, 0.4, -0.05])
    np.testing.assert_allclose(replay(sim, start, actions, params),
                               _puck_oracle(start, actions, *params, sim.dt), rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(vx=st.floats(-3, 3), vy=st.floats(-3, 3), mu=st.floats(0.01, 1.0))
def test_puck_speed_non_increasing(vx, vy, mu):
    sim = SlidingPuck2D()
    state = np.array([0.0, 0.0, vx, vy])
    for _ in range(300):
        new = sim.step(state, [0.0, 0.0], [0.5, mu, mu / 2])
        assert np.all(np.abs(new[2:]) <= np.abs(state[2:]))
        state = new


def test_undamped_energy_invariant():
    dt, m, k = 0.01, 2.0, 30.0
    sim = MassSpringDamper(dt=dt)

    def energy(s):
        x, v = s
        return 0.5 * m * v * v + 0.5 * k * x * x - 0.5 * dt * k * x * v

    state = np.array([1.0, 0.3])
    e0 = energy(state)
    drift = 0.0
    for _ in range(10_000):
        state = sim.step(state, [0.0], [m, k, 0.0])
        drift = max(drift, abs(energy(state) - e0) / e0)
    assert drift < 1e-9


def test_invalid_parameters_rejected():
    sim = MassSpringDamper()
    with pytest.raises(InvalidParameters, match="m must be positive"):
        sim.step([0.0, 0.0], [0.0], [0.0, 1.0, 1.0])
    with pytest.raises(InvalidParameters, match="non-negative"):
        sim.step([0.0, 0.0], [0.0], [1.0, -1.0, 1.0])
    with pytest.raises(ValueError, match="expects 3"):
        sim.step([0.0, 0.0], [0.0], [1.0, 1.0])
    with pytest.raises(KeyError):
        make_simulator("unknown")


def test_fixed_parameters_leave_space():
    sim = MassSpringDamper().with_fixed({"c": 1.5})
    assert sim.param_space.names == ("m", "k")
    np.testing.assert_array_equal(sim.step([0.5, 0.1], [1.0], [2.0, 30.0]),
                                  MassSpringDamper().step([0.5, 0.1], [1.0], [2.0, 30.0, 1.5]))


def test_noiseless_dataset_is_self_consistent():
    sim = MassChain3()
    data = generate_dataset(DataGenConfig(sim, sim.nominal, transitions=150, trajectories=2))
    ds = build_dataset(data.trajectories, 1)
    replayed = sim.replay(ds.starts, ds.actions, sim.nominal)
    assert np.max(np.abs(replayed - ds.targets)) == 0.0
    ds3 = build_dataset(data.trajectories, 3)
    np.testing.assert_array_equal(sim.replay(ds3.starts, ds3.actions, sim.nominal), ds3.targets)


def test_resampling_schedule():
    sim = MassSpringDamper()
    gt = DynamicsDistribution(sim.param_space, sim.nominal, [0.2, 2.0, 0.1])
    data = generate_dataset(DataGenConfig(sim, gt, resample_every=25, transitions=100, seed=4))
    assert [d.start for d in data.draws] == [0, 25, 50, 75]
    assert len(data.sidecar()["draws"]) == 4
    assert len({tuple(d.values) for d in data.draws}) == 4


def test_single_draw_equals_fixed_values():
    sim = MassSpringDamper()
    gt = DynamicsDistribution(sim.param_space, sim.nominal, [0.2, 2.0, 0.1])
    data = generate_dataset(DataGenConfig(sim, gt, resample_every=0, transitions=80,
                                          trajectories=2, seed=9))
    assert len(data.draws) == 1
    xi = data.draws[0].values
    fixed = generate_dataset(DataGenConfig(sim, xi, transitions=80, trajectories=2, seed=9))
    for a, b in zip(data.trajectories, fixed.trajectories):
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.states, b.states)
    assert data.sidecar()["values"] == [float(v) for v in xi]


def test_observation_noise_variance():
    sim = MassSpringDamper()
    std = np.sqrt(1e-5)
    data = generate_dataset(DataGenConfig(sim, sim.nominal, noise_std=std, transitions=5000,
                                          trajectories=2, seed=11))
    resid = np.concatenate([(t.states - c).ravel()
                            for t, c in zip(data.trajectories, data.clean_states)])
    assert resid.size >= 10_000
    var = resid.var(ddof=1)
    # standard error of a Gaussian sample variance
    se = 1e-5 * np.sqrt(2.0 / (resid.size - 1))
    assert abs(var - 1e-5) < 3 * se


def test_generation_is_seeded():
    sim = SlidingPuck2D()
    a = generate_dataset(DataGenConfig(sim, sim.nominal, transitions=60, seed=5))
    b = generate_dataset(DataGenConfig(sim, sim.nominal, transitions=60, seed=5))
    c = generate_dataset(DataGenConfig(sim, sim.nominal, transitions=60, seed=6))
    np.testing.assert_array_equal(a.trajectories[0].states, b.trajectories[0].states)
    assert not np.array_equal(a.trajectories[0].actions, c.trajectories[0].actions)


def test_misspecification_bookkeeping():
    sim = MassChain3()
    wrong = inject_misspecification(sim, 0, sim.nominal[0] + 1.0)
    assert wrong.param_space.names == ("m2", "m3", "k")
    with pytest.raises(ValueError, match="already frozen"):
        inject_misspecification(wrong, 0, 1.0)
    with pytest.raises(IndexError):
        inject_misspecification(sim, 3, 1.0)
    with pytest.raises(TypeError):
        inject_misspecification(MassSpringDamper(), 0, 1.0)


def test_misspecification_changes_replay_only_when_wrong():
    sim = MassChain3()
    truth = np.array(sim.nominal)
    data = generate_dataset(DataGenConfig(sim, truth, transitions=100, seed=2))
    ds = build_dataset(data.trajectories, 1)
    rest = truth[1:]
    wrong = inject_misspecification(sim, 0, truth[0] + 1.0)
    assert np.max(np.abs(wrong.replay(ds.starts, ds.actions, rest) - ds.targets)) > 0
    same = inject_misspecification(sim, 0, truth[0])
    np.testing.assert_array_equal(same.replay(ds.starts, ds.actions, rest),
                                  sim.replay(ds.starts, ds.actions, truth))
