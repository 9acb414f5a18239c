"""Shared domain types: parameter spaces, dynamics distributions, trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_STD_MIN = 1e-5


def _vec(values) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParameterSpace:
    """Search box over the optimizable physics parameters.

    Attributes
    ----------
    names : tuple of str
        Parameter identifiers, in vector order.
    lower, upper : ndarray
        Search minima and maxima for the means, physical units.
    validity_lower : ndarray
        Hard physical floor; any sampled value must lie strictly above it.
    std_min : float
        Floor on every standard deviation.
    std_max : ndarray
        Per-parameter ceiling on the standard deviation.
    """

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    validity_lower: np.ndarray
    std_min: float
    std_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        for attr in ("lower", "upper", "validity_lower", "std_max"):
            object.__setattr__(self, attr, _vec(getattr(self, attr)))
        object.__setattr__(self, "std_min", float(self.std_min))
        d = len(self.names)
        if len(set(self.names)) != d:
            raise ValueError(f"duplicate parameter names: {self.names}")
        for attr in ("lower", "upper", "validity_lower", "std_max"):
            if getattr(self, attr).shape != (d,):
                raise ValueError(f"{attr} has {getattr(self, attr).size} entries, expected {d}")
        if not np.all(self.lower < self.upper):
            raise ValueError("search bounds must satisfy lower < upper")
        if not np.all(self.validity_lower <= self.lower):
            raise ValueError("validity_lower must not exceed the search minimum")
        if not self.std_min > 0:
            raise ValueError("std_min must be positive")
        if not np.all(self.std_min < self.std_max):
            raise ValueError("std_max must exceed std_min for every parameter")

    @classmethod
    def from_bounds(cls, names, lower, upper, validity_lower=None,
                    std_min=DEFAULT_STD_MIN, std_max=None) -> "ParameterSpace":
        """Build a space with the default std ceiling of a quarter of the search width."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if validity_lower is None:
            validity_lower = np.minimum(lower, 0.0)
        if std_max is None:
            std_max = (upper - lower) / 4.0
        return cls(names, lower, upper, validity_lower, std_min, std_max)

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, keep: Sequence[str]) -> "ParameterSpace":
        idx = [self.index(n) for n in keep]
        return ParameterSpace(
            [self.names[i] for i in idx], self.lower[idx], self.upper[idx],
            self.validity_lower[idx], self.std_min, self.std_max[idx])

    def midpoint(self) -> "DynamicsDistribution":
        """Neutral starting guess: centred means, geometric-mean stds."""
        return DynamicsDistribution(
            self, 0.5 * (self.lower + self.upper), np.sqrt(self.std_min * self.std_max))

    def point(self, values) -> "DynamicsDistribution":
        """Distribution collapsed onto ``values`` with every std at the floor."""
        return DynamicsDistribution(self, values, np.full(self.dim, self.std_min))


@dataclass(frozen=True)
class DynamicsDistribution:
    """Uncorrelated per-parameter (mean, std) pairs over a :class:`ParameterSpace`.

    Construction only checks shapes; bound and floor checks are reported by
    :func:`validate_distribution` so that baseline fits whose spread falls
    under the floor can still be represented.
    """

    space: ParameterSpace
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec(self.mean))
        object.__setattr__(self, "std", _vec(self.std))
        if self.mean.shape != self.std.shape or self.mean.size != self.space.dim:
            raise ValueError(
                f"dimension mismatch: mean {self.mean.size}, std {self.std.size}, "
                f"space {self.space.dim}")

    @property
    def variance(self) -> np.ndarray:
        return self.std ** 2

    @property
    def total_variance(self) -> float:
        return float(np.sum(self.std ** 2))

    def as_dict(self) -> dict:
        return {"names": list(self.space.names),
                "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}


def validate_distribution(phi) -> str | None:
    """Return ``None`` when every invariant holds, else a description of the first violation."""
    mean = np.asarray(phi.mean, dtype=float).reshape(-1)
    std = np.asarray(phi.std, dtype=float).reshape(-1)
    space = phi.space
    if mean.size != std.size or mean.size != space.dim:
        return (f"dimension mismatch: mean has {mean.size} entries, std has {std.size}, "
                f"space has {space.dim}")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        return "non-finite entries"
    for i, name in enumerate(space.names):
        if std[i] < space.std_min:
            return f"std below floor for {name}: {std[i]!r} < {space.std_min!r}"
        if std[i] > space.std_max[i]:
            return f"std above ceiling for {name}: {std[i]!r} > {space.std_max[i]!r}"
        if not space.lower[i] <= mean[i] <= space.upper[i]:
            return (f"mean outside search space for {name}: {mean[i]!r} not in "
                    f"[{space.lower[i]!r}, {space.upper[i]!r}]")
    return None


@dataclass(frozen=True)
class Trajectory:
    """Recorded states and the actions applied between them.

    ``actions[t]`` is applied between ``states[t]`` and ``states[t + 1]``.
    """

    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        states = np.array(self.states, dtype=float)
        actions = np.array(self.actions, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if actions.ndim == 1:
            actions = actions[:, None]
        if states.ndim != 2 or actions.ndim != 2:
            raise ValueError("states and actions must be 2-D arrays")
        if states.shape[0] != actions.shape[0] + 1:
            raise ValueError(
                f"expected len(states) == len(actions) + 1, got {states.shape[0]} "
                f"and {actions.shape[0]}")
        if times.shape[0] != states.shape[0]:
            raise ValueError("one timestamp per state is required")
        if np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for arr in (times, states, actions):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class TransitionDataset:
    """Stacked ``(s_t, a_t..a_{t+lambda-1}, s_{t+lambda})`` tuples.

    Arrays are stored stacked for vectorized replay: ``starts`` is (T, n),
    ``actions`` is (T, lambda, m) and ``targets`` is (T, n).
    """

    horizon: int
    starts: np.ndarray
    actions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        starts = np.array(self.starts, dtype=float)
        actions = np.array(self.actions, dtype=float)
        targets = np.array(self.targets, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if actions.ndim != 3 or actions.shape[1] != self.horizon:
            raise ValueError(f"every action window needs exactly {self.horizon} entries")
        if not (starts.shape == targets.shape and starts.shape[0] == actions.shape[0]):
            raise ValueError("inconsistent transition array shapes")
        for arr in (starts, actions, targets):
            arr.setflags(write=False)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "targets", targets)

    @property
    def state_dim(self) -> int:
        return self.starts.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def __len__(self) -> int:
        return self.starts.shape[0]

    def __getitem__(self, t):
        return self.starts[t], self.actions[t], self.targets[t]

    def subset(self, index) -> "TransitionDataset":
        return TransitionDataset(self.horizon, self.starts[index], self.actions[index],
                                 self.targets[index])

    @classmethod
    def concatenate(cls, parts: Sequence["TransitionDataset"]) -> "TransitionDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        horizons = {p.horizon for p in parts}
        if len(horizons) != 1:
            raise ValueError(f"mixed horizons: {sorted(horizons)}")
        return cls(parts[0].horizon,
                   np.concatenate([p.starts for p in parts]),
                   np.concatenate([p.actions for p in parts]),
                   np.concatenate([p.targets for p in parts]))


def extract_transitions(traj: Trajectory, horizon: int) -> TransitionDataset:
    """Slide a window of ``horizon`` actions over one trajectory.

    Yields ``len(traj) - horizon + 1`` transitions; windows never span two
    trajectories.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    n_actions = len(traj)
    if traj.states.shape[0] < horizon + 1:
        raise ValueError(
            f"trajectory has {traj.states.shape[0]} states; at least {horizon + 1} are "
            f"needed for horizon {horizon}")
    count = n_actions - horizon + 1
    windows = np.lib.stride_tricks.sliding_window_view(traj.actions, horizon, axis=0)
    # sliding_window_view puts the window axis last: (count, m, horizon)
    windows = np.ascontiguousarray(np.swapaxes(windows, 1, 2))
    return TransitionDataset(horizon, traj.states[:count], windows,
                             traj.states[horizon:horizon + count])


def build_dataset(trajectories: Sequence[Trajectory], horizon: int) -> TransitionDataset:
    """Concatenate per-trajectory transition lists in trajectory order."""
    return TransitionDataset.concatenate([extract_transitions(t, horizon) for t in trajectories])


@dataclass
class FitResult:
    """Outcome of one distribution fit."""

    phi_star: DynamicsDistribution
    objective_trace: list[float]
    mse: float
    epsilon: np.ndarray
    evaluations: int
    seed: int
    objective: str = "dropo"
    mse_trace: list[float] = field(default_factory=list)
    n_transitions: int = 0
    stop: str = "budget"

    @property
    def mse_per_transition(self) -> float:
        return self.mse / self.n_transitions if self.n_transitions else float("nan")
