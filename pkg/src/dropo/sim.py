"""Deterministic toy simulators, excitation policies and synthetic data generation.

Every simulator integrates with semi-implicit Euler (velocity first, then
position with the new velocity) and is vectorized: states, actions and
parameters broadcast against each other, so one call replays a whole batch of
transitions under a whole batch of sampled dynamics.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import ClassVar, Mapping, Sequence

import numpy as np

from .core import DEFAULT_STD_MIN, DynamicsDistribution, ParameterSpace, Trajectory

GRAVITY = 9.81
VELOCITY_DEADBAND = 1e-6


class InvalidParameters(ValueError):
    pass


@dataclass(frozen=True)
class Simulator:
    """Base class for the parameterized forward models.

    Subclasses declare ``param_names``, ``nominal`` values, which parameters
    must stay strictly positive, and implement :meth:`_advance`.

    ``fixed`` freezes parameters at given values and removes them from the
    optimizable :attr:`param_space`.
    """

    dt: float = 0.01
    fixed: tuple[tuple[str, float], ...] = ()
    std_min: float = DEFAULT_STD_MIN
    space_override: ParameterSpace | None = field(default=None, compare=False)

    sim_id: ClassVar[str] = ""
    param_names: ClassVar[tuple[str, ...]] = ()
    nominal: ClassVar[tuple[float, ...]] = ()
    positive: ClassVar[tuple[str, ...]] = ()
    state_names: ClassVar[tuple[str, ...]] = ()
    action_dim: ClassVar[int] = 1

    def __post_init__(self):
        fixed = tuple((str(k), float(v)) for k, v in dict(self.fixed).items())
        for name, _ in fixed:
            if name not in self.param_names:
                raise KeyError(f"{self.sim_id} has no parameter {name!r}")
        object.__setattr__(self, "fixed", fixed)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.space_override is not None and self.space_override.names != self.free_names:
            raise ValueError(
                f"parameter space {self.space_override.names} does not match the free "
                f"parameters {self.free_names}")

    @property
    def state_dim(self) -> int:
        return len(self.state_names)

    @property
    def free_names(self) -> tuple[str, ...]:
        frozen = dict(self.fixed)
        return tuple(n for n in self.param_names if n not in frozen)

    @property
    def param_space(self) -> ParameterSpace:
        if self.space_override is not None:
            return self.space_override
        return self.default_space().subset(self.free_names)

    def default_space(self) -> ParameterSpace:
        """Search box of [nominal / 2, 2 * nominal] over every parameter."""
        nominal = np.array(self.nominal)
        return ParameterSpace.from_bounds(self.param_names, nominal / 2, nominal * 2,
                                          validity_lower=np.zeros_like(nominal),
                                          std_min=self.std_min)

    def with_fixed(self, overrides: Mapping[str, float]) -> "Simulator":
        merged = dict(self.fixed)
        merged.update(overrides)
        return dataclasses.replace(self, fixed=tuple(merged.items()), space_override=None)

    def with_space(self, space: ParameterSpace) -> "Simulator":
        return dataclasses.replace(self, space_override=space)

    def full_params(self, params) -> np.ndarray:
        """Insert frozen values into free-parameter vectors, shape (..., n_params)."""
        params = np.asarray(params, dtype=float)
        free = self.free_names
        if params.shape[-1] != len(free):
            raise ValueError(f"{self.sim_id} expects {len(free)} free parameters, "
                             f"got {params.shape[-1]}")
        if not self.fixed:
            return params
        frozen = dict(self.fixed)
        cols = []
        for name in self.param_names:
            if name in frozen:
                cols.append(np.full(params.shape[:-1], frozen[name]))
            else:
                cols.append(params[..., free.index(name)])
        return np.stack(cols, axis=-1)

    def check_params(self, full: np.ndarray) -> None:
        if not np.all(np.isfinite(full)):
            raise InvalidParameters(f"{self.sim_id}: non-finite parameters")
        for i, name in enumerate(self.param_names):
            col = full[..., i]
            if name in self.positive:
                if np.any(col <= 0):
                    raise InvalidParameters(f"{self.sim_id}: {name} must be positive, "
                                            f"got {float(np.min(col))!r}")
            elif np.any(col < 0):
                raise InvalidParameters(f"{self.sim_id}: {name} must be non-negative, "
                                        f"got {float(np.min(col))!r}")

    def step(self, state, action, params) -> np.ndarray:
        """Advance by one ``dt``; all arguments broadcast over leading axes."""
        full = self.full_params(params)
        self.check_params(full)
        state = np.asarray(state, dtype=float)
        action = np.asarray(action, dtype=float)
        if state.shape[-1] != self.state_dim or action.shape[-1] != self.action_dim:
            raise ValueError(f"{self.sim_id}: expected state dim {self.state_dim} and action "
                             f"dim {self.action_dim}, got {state.shape[-1]} and "
                             f"{action.shape[-1]}")
        return self._advance(state, action, full)

    def replay(self, start, actions, params) -> np.ndarray:
        """Set the state to ``start`` and execute the action window.

        ``actions`` has the window on its second-to-last axis, shape
        (..., horizon, action_dim).
        """
        actions = np.asarray(actions, dtype=float)
        if actions.ndim < 2 or actions.shape[-2] < 1:
            raise ValueError("action window must hold at least one action")
        full = self.full_params(params)
        self.check_params(full)
        state = np.asarray(start, dtype=float)
        for j in range(actions.shape[-2]):
            state = self._advance(state, actions[..., j, :], full)
        return state

    def _advance(self, state, action, full):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"id": self.sim_id, "dt": self.dt, "fixed": dict(self.fixed)}


@dataclass(frozen=True)
class MassSpringDamper(Simulator):
    """Single mass on a linear spring and viscous damper, driven by a force."""

    sim_id: ClassVar[str] = "mass_spring_damper"
    param_names: ClassVar[tuple[str, ...]] = ("m", "k", "c")
    nominal: ClassVar[tuple[float, ...]] = (2.0, 30.0, 1.5)
    positive: ClassVar[tuple[str, ...]] = ("m",)
    state_names: ClassVar[tuple[str, ...]] = ("x", "v")

    def _advance(self, state, action, full):
        x, v = state[..., 0], state[..., 1]
        m, k, c = full[..., 0], full[..., 1], full[..., 2]
        v_new = v + self.dt * (action[..., 0] - k * x - c * v) / m
        x_new = x + self.dt * v_new
        return np.stack(np.broadcast_arrays(x_new, v_new), axis=-1)


@dataclass(frozen=True)
class SlidingPuck2D(Simulator):
    """Puck on a plane with anisotropic Coulomb friction along x and y."""

    sim_id: ClassVar[str] = "sliding_puck_2d"
    param_names: ClassVar[tuple[str, ...]] = ("m", "fx", "fy")
    nominal: ClassVar[tuple[float, ...]] = (0.5, 0.2, 0.35)
    positive: ClassVar[tuple[str, ...]] = ("m",)
    state_names: ClassVar[tuple[str, ...]] = ("x", "y", "vx", "vy")
    action_dim: ClassVar[int] = 2

    def _axis(self, v, force, m, mu):
        limit = mu * m * GRAVITY
        moving = np.abs(v) >= VELOCITY_DEADBAND
        kinetic = v + self.dt * (force - limit * np.sign(v)) / m
        # friction alone cannot reverse the motion
        stopped = (np.sign(kinetic) != np.sign(v)) & (np.abs(force) <= limit)
        kinetic = np.where(stopped, 0.0, kinetic)
        breakaway = np.abs(force) > limit
        static = np.where(breakaway, self.dt * (force - limit * np.sign(force)) / m, 0.0)
        return np.where(moving, kinetic, static)

    def _advance(self, state, action, full):
        m, fx, fy = full[..., 0], full[..., 1], full[..., 2]
        vx = self._axis(state[..., 2], action[..., 0], m, fx)
        vy = self._axis(state[..., 3], action[..., 1], m, fy)
        x = state[..., 0] + self.dt * vx
        y = state[..., 1] + self.dt * vy
        return np.stack(np.broadcast_arrays(x, y, vx, vy), axis=-1)


@dataclass(frozen=True)
class MassChain3(Simulator):
    """Three masses in a row joined by springs, the first also tied to a wall.

    All springs share stiffness ``k``; every mass sees a fixed viscous drag.
    The force acts on the first mass.
    """

    sim_id: ClassVar[str] = "mass_chain_3"
    param_names: ClassVar[tuple[str, ...]] = ("m1", "m2", "m3", "k")
    nominal: ClassVar[tuple[float, ...]] = (3.534, 3.927, 2.714, 50.0)
    positive: ClassVar[tuple[str, ...]] = ("m1", "m2", "m3")
    state_names: ClassVar[tuple[str, ...]] = ("x1", "x2", "x3", "v1", "v2", "v3")
    drag: ClassVar[float] = 0.5

    def _advance(self, state, action, full):
        x1, x2, x3 = state[..., 0], state[..., 1], state[..., 2]
        v1, v2, v3 = state[..., 3], state[..., 4], state[..., 5]
        m1, m2, m3, k = full[..., 0], full[..., 1], full[..., 2], full[..., 3]
        f1 = action[..., 0] - k * x1 + k * (x2 - x1) - self.drag * v1
        f2 = k * (x1 - x2) + k * (x3 - x2) - self.drag * v2
        f3 = k * (x2 - x3) - self.drag * v3
        v1n = v1 + self.dt * f1 / m1
        v2n = v2 + self.dt * f2 / m2
        v3n = v3 + self.dt * f3 / m3
        out = (x1 + self.dt * v1n, x2 + self.dt * v2n, x3 + self.dt * v3n, v1n, v2n, v3n)
        return np.stack(np.broadcast_arrays(*out), axis=-1)


SIMULATORS: dict[str, type[Simulator]] = {
    cls.sim_id: cls for cls in (MassSpringDamper, SlidingPuck2D, MassChain3)
}


def make_simulator(sim_id: str, dt: float = 0.01, fixed: Mapping[str, float] | None = None,
                   std_min: float = DEFAULT_STD_MIN) -> Simulator:
    try:
        cls = SIMULATORS[sim_id]
    except KeyError:
        raise KeyError(f"unknown simulator {sim_id!r}; choose from {sorted(SIMULATORS)}") from None
    return cls(dt=dt, fixed=tuple((fixed or {}).items()), std_min=std_min)


def step(sim: Simulator, state, action, params) -> np.ndarray:
    return sim.step(state, action, params)


def replay(sim: Simulator, start, actions, params) -> np.ndarray:
    return sim.replay(start, actions, params)


def inject_misspecification(sim: MassChain3, index: int, wrong_value: float) -> Simulator:
    """Freeze mass ``index`` (0-based) at ``wrong_value`` and drop it from the search space."""
    if not isinstance(sim, MassChain3):
        raise TypeError("misspecification targets a MassChain3 simulator")
    masses = ("m1", "m2", "m3")
    if not 0 <= index < len(masses):
        raise IndexError(f"mass index {index} out of range 0..{len(masses) - 1}")
    if masses[index] not in sim.free_names:
        raise ValueError(f"{masses[index]} is already frozen")
    return sim.with_fixed({masses[index]: float(wrong_value)})


# --- excitation --------------------------------------------------------------

EXCITATIONS = ("chirp", "pulses")

_CHIRP_AMPLITUDE = {"mass_spring_damper": 10.0, "mass_chain_3": 30.0}


def chirp(n_steps: int, dt: float, amplitude: float, f0: float = 0.1, f1: float = 2.5,
          phase: float = 0.0) -> np.ndarray:
    """Linear frequency sweep from ``f0`` to ``f1`` Hz over the episode."""
    t = np.arange(n_steps) * dt
    duration = max(n_steps * dt, dt)
    return amplitude * np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t ** 2 / duration) + phase)


def force_pulses(n_steps: int, dt: float, amplitude: float, action_dim: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant random pushes separated by idle stretches."""
    out = np.zeros((n_steps, action_dim))
    t = 0
    push = True
    while t < n_steps:
        length = int(rng.integers(max(1, int(0.1 / dt)), max(2, int(0.5 / dt)) + 1))
        if push:
            out[t:t + length] = rng.uniform(-amplitude, amplitude, size=action_dim)
        t += length
        push = not push
    return out


def excitation_actions(sim: Simulator, policy: str, n_steps: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Open-loop action sequence of shape (n_steps, action_dim)."""
    if policy == "chirp":
        amplitude = _CHIRP_AMPLITUDE.get(sim.sim_id, 10.0) * rng.uniform(0.7, 1.3)
        phase = rng.uniform(0, 2 * np.pi, size=sim.action_dim)
        return np.stack([chirp(n_steps, sim.dt, amplitude, phase=p) for p in phase], axis=1)
    if policy == "pulses":
        return force_pulses(n_steps, sim.dt, 6.0, sim.action_dim, rng)
    raise ValueError(f"unknown excitation policy {policy!r}; choose from {EXCITATIONS}")


def default_excitation(sim: Simulator) -> str:
    return "pulses" if isinstance(sim, SlidingPuck2D) else "chirp"


# --- dataset generation ------------------------------------------------------

@dataclass(frozen=True)
class DataGenConfig:
    """Recipe for a synthetic offline dataset.

    ``ground_truth`` is either a vector of fixed free-parameter values or a
    :class:`DynamicsDistribution` drawn from every ``resample_every``
    transitions (0 draws once for the whole dataset).
    """

    sim: Simulator
    ground_truth: object
    resample_every: int = 0
    excitation: str | None = None
    noise_std: float | Sequence[float] = 0.0
    transitions: int = 200
    trajectories: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.resample_every < 0:
            raise ValueError("resample_every must be >= 0")
        if self.transitions < 1 or self.trajectories < 1:
            raise ValueError("need at least one trajectory with one transition")
        if np.any(np.asarray(self.noise_std, dtype=float) < 0):
            raise ValueError("noise_std must be non-negative")
        policy = self.excitation or default_excitation(self.sim)
        if policy not in EXCITATIONS:
            raise ValueError(f"unknown excitation policy {policy!r}")
        object.__setattr__(self, "excitation", policy)
        if not isinstance(self.ground_truth, DynamicsDistribution):
            values = np.array(self.ground_truth, dtype=float).reshape(-1)
            if values.size != len(self.sim.free_names):
                raise ValueError(f"ground truth has {values.size} values, simulator has "
                                 f"{len(self.sim.free_names)} free parameters")
            object.__setattr__(self, "ground_truth", values)

    def noise_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noise_std, dtype=float),
                               (self.sim.state_dim,)).copy()


@dataclass
class DynamicsDraw:
    trajectory: int
    start: int
    values: np.ndarray


@dataclass
class GeneratedData:
    trajectories: list[Trajectory]
    clean_states: list[np.ndarray]
    draws: list[DynamicsDraw]
    config: DataGenConfig

    def sidecar(self) -> dict:
        """Ground-truth record kept next to generated files for later checks."""
        cfg = self.config
        gt = cfg.ground_truth
        record = {
            "simulator": cfg.sim.describe(),
            "names": list(cfg.sim.free_names),
            "resample_every": cfg.resample_every,
            "excitation": cfg.excitation,
            "noise_std": [float(v) for v in cfg.noise_vector()],
            "seed": cfg.seed,
            "draws": [{"trajectory": d.trajectory, "start": d.start,
                       "values": [float(v) for v in d.values]} for d in self.draws],
        }
        if isinstance(gt, DynamicsDistribution):
            record["ground_truth"] = {"mean": [float(v) for v in gt.mean],
                                      "std": [float(v) for v in gt.std]}
            if len(self.draws) == 1:
                record["values"] = record["draws"][0]["values"]
        else:
            record["ground_truth"] = {"values": [float(v) for v in gt]}
            record["values"] = record["ground_truth"]["values"]
        return record


def generate_dataset(cfg: DataGenConfig) -> GeneratedData:
    """Roll the excitation policy out under ground-truth dynamics.

    Dynamics evolve on clean states; Gaussian observation noise is only
    added to the recorded copy.
    """
    from .likelihood import sample_dynamics

    sim = cfg.sim
    root = np.random.SeedSequence(cfg.seed)
    dyn_rng, act_rng, noise_rng = (np.random.Generator(np.random.PCG64(s))
                                   for s in root.spawn(3))
    noise = cfg.noise_vector()
    gt = cfg.ground_truth

    def draw():
        if isinstance(gt, DynamicsDistribution):
            return sample_dynamics(gt, 1, dyn_rng)[0]
        return np.array(gt)

    draws: list[DynamicsDraw] = []
    trajectories, clean = [], []
    shared = draw() if cfg.resample_every == 0 else None
    for j in range(cfg.trajectories):
        actions = excitation_actions(sim, cfg.excitation, cfg.transitions, act_rng)
        states = np.zeros((cfg.transitions + 1, sim.state_dim))
        xi = shared
        if shared is not None and j == 0:
            draws.append(DynamicsDraw(0, 0, shared))
        for t in range(cfg.transitions):
            if cfg.resample_every and t % cfg.resample_every == 0:
                xi = draw()
                draws.append(DynamicsDraw(j, t, xi))
            states[t + 1] = sim.step(states[t], actions[t], xi)
        recorded = states + noise_rng.standard_normal(states.shape) * noise
        times = np.arange(cfg.transitions + 1) * sim.dt
        trajectories.append(Trajectory(times, recorded, actions))
        clean.append(states)
    return GeneratedData(trajectories, clean, draws, cfg)
