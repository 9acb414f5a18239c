"""Turn asynchronous sensor logs into simulator-timestep trajectories.

Positions (and quaternion components) are interpolated with Akima splines,
velocities come from the spline derivative, commanded actions are held
constant between their ticks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Trajectory

ROLES = ("position", "quaternion", "action")
DERIVATIVE_PREFIX = "dot:"


# --- Akima spline ------------------------------------------------------------

def akima_slopes(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Knot slopes from Akima's weighted average of neighbouring chord slopes.

    The two missing chord slopes at each end are extrapolated linearly
    (``d[-1] = 2 d[0] - d[1]`` and so on). Where both weights vanish the
    slope is the mean of the two adjacent chords.
    """
    d = np.diff(ys) / np.diff(xs)
    m = np.empty(d.size + 4)
    m[2:-2] = d
    m[1] = 2 * m[2] - m[3]
    m[0] = 2 * m[1] - m[2]
    m[-2] = 2 * m[-3] - m[-4]
    m[-1] = 2 * m[-2] - m[-3]
    w_left = np.abs(m[3:] - m[2:-1])    # |d_{i+1} - d_i|
    w_right = np.abs(m[1:-2] - m[:-3])  # |d_{i-1} - d_{i-2}|
    den = w_left + w_right
    tie = den == 0
    safe = np.where(tie, 1.0, den)
    slopes = (w_left * m[1:-2] + w_right * m[2:-1]) / safe
    return np.where(tie, 0.5 * (m[1:-2] + m[2:-1]), slopes)


@dataclass(frozen=True)
class AkimaSpline:
    """Piecewise cubic Hermite interpolant through ``(xs, ys)``.

    ``linear`` marks the fallback used below five knots, where the
    interpolant is piecewise linear.
    """

    xs: np.ndarray
    ys: np.ndarray
    slopes: np.ndarray
    linear: bool = False

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.xs[0]) or np.any(x > self.xs[-1]) or np.any(np.isnan(x)):
            raise ValueError(f"evaluation outside the knot range [{self.xs[0]!r}, "
                             f"{self.xs[-1]!r}]; extrapolation is not supported")
        i = np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.xs.size - 2)
        return x, i

    def _coefficients(self, i):
        h = self.xs[i + 1] - self.xs[i]
        d = (self.ys[i + 1] - self.ys[i]) / h
        if self.linear:
            zero = np.zeros_like(d)
            return d, zero, zero
        t0, t1 = self.slopes[i], self.slopes[i + 1]
        return t0, (3 * d - 2 * t0 - t1) / h, (t0 + t1 - 2 * d) / h ** 2

    def __call__(self, x):
        x, i = self._locate(x)
        u = x - self.xs[i]
        t0, c2, c3 = self._coefficients(i)
        value = self.ys[i] + u * (t0 + u * (c2 + u * c3))
        # the last cubic reaches the right end knot only up to rounding
        value = np.where(x == self.xs[-1], self.ys[-1], value)
        return value if value.ndim else float(value)

    def derivative(self, x):
        x, i = self._locate(x)
        u = x - self.xs[i]
        t0, c2, c3 = self._coefficients(i)
        value = t0 + u * (2 * c2 + 3 * u * c3)
        return value if np.ndim(value) else float(value)


def fit_akima(xs, ys) -> AkimaSpline:
    xs = np.array(xs, dtype=float)
    ys = np.array(ys, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise ValueError("xs and ys must be 1-D arrays of equal length")
    if xs.size < 2:
        raise ValueError("at least two knots are required")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("knot abscissae must be strictly increasing")
    if xs.size < 5:
        return AkimaSpline(xs, ys, np.full(xs.size, np.nan), linear=True)
    return AkimaSpline(xs, ys, akima_slopes(xs, ys))


def evaluate(spline: AkimaSpline, x):
    return spline(x)


def derivative(spline: AkimaSpline, x):
    return spline.derivative(x)


# --- sensor logs -------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    """One sensor stream. Effective timestamps are ``times + offset``.

    Keeping the shift separate makes a shift followed by its negation restore
    the timestamps exactly.
    """

    times: np.ndarray
    values: np.ndarray
    role: str
    offset: float = 0.0

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != times.size:
            raise ValueError("one value row per timestamp is required")
        if self.role not in ROLES:
            raise ValueError(f"unknown channel role {self.role!r}; choose from {ROLES}")
        if np.any(np.diff(times) <= 0):
            raise ValueError("channel timestamps must be strictly increasing")
        if self.role == "quaternion":
            if values.shape[1] != 4:
                raise ValueError("quaternion channels need four components")
            if np.any(np.abs(np.linalg.norm(values, axis=1) - 1.0) > 1e-6):
                raise ValueError("quaternion samples must have unit norm (within 1e-6)")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def t(self) -> np.ndarray:
        return self.times + self.offset

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SensorLog:
    channels: Mapping[str, Channel]

    def __post_init__(self):
        object.__setattr__(self, "channels", dict(self.channels))

    def __getitem__(self, name: str) -> Channel:
        try:
            return self.channels[name]
        except KeyError:
            raise KeyError(f"no channel named {name!r}") from None

    def names(self, role: str | None = None) -> list[str]:
        return [n for n, c in self.channels.items() if role is None or c.role == role]


def synchronize(log: SensorLog, offsets: Mapping[str, float]) -> SensorLog:
    """Shift channel timestamps by per-channel offsets (seconds); values untouched."""
    channels = dict(log.channels)
    for name, shift in offsets.items():
        shift = float(shift)
        if not np.isfinite(shift):
            raise ValueError(f"offset for {name!r} is not finite")
        ch = log[name]
        channels[name] = Channel(ch.times, ch.values, ch.role, ch.offset + shift)
    return SensorLog(channels)


def common_window(log: SensorLog, names: Sequence[str]) -> tuple[float, float]:
    start = max(float(log[n].t[0]) for n in names)
    end = min(float(log[n].t[-1]) for n in names)
    if not end > start:
        raise ValueError(f"no common window: channels {list(names)} do not overlap in time")
    return start, end


def default_layout(log: SensorLog) -> list[str]:
    positions = log.names("position")
    return positions + log.names("quaternion") + [DERIVATIVE_PREFIX + n for n in positions]


def zero_order_hold(times: np.ndarray, values: np.ndarray, query: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(times, query + 1e-9 * max(1.0, float(np.max(np.abs(query)))),
                          side="right") - 1
    return values[np.clip(idx, 0, times.size - 1)]


def resample_to_timestep(log: SensorLog, dt: float, layout: Sequence[str] | None = None,
                         actions: Sequence[str] | None = None) -> Trajectory:
    """Evaluate every channel on a uniform ``dt`` grid over their common window.

    ``layout`` names the state entries in order; ``"dot:<name>"`` stands for
    the spline derivative of position channel ``<name>``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    layout = list(layout) if layout is not None else default_layout(log)
    actions = list(actions) if actions is not None else log.names("action")
    sources = []
    for entry in layout:
        name = entry[len(DERIVATIVE_PREFIX):] if entry.startswith(DERIVATIVE_PREFIX) else entry
        ch = log[name]
        if ch.role == "action":
            raise ValueError(f"action channel {name!r} cannot be part of the state")
        if entry.startswith(DERIVATIVE_PREFIX) and ch.role != "position":
            raise ValueError(f"derivatives are only taken of position channels, not {name!r}")
        sources.append(name)
    for name in actions:
        if log[name].role != "action":
            raise ValueError(f"channel {name!r} is not an action channel")
    used = sorted(set(sources) | set(actions))
    if not used:
        raise ValueError("nothing to resample")
    start, end = common_window(log, used)
    if end - start < 2 * dt:
        raise ValueError(f"common window [{start!r}, {end!r}] is shorter than 2 * dt")
    n = int(np.floor((end - start) / dt + 1e-9)) + 1
    grid = start + dt * np.arange(n)
    grid = np.minimum(grid, end)

    splines: dict[str, list[AkimaSpline]] = {}

    def fitted(name):
        if name not in splines:
            ch = log[name]
            splines[name] = [fit_akima(ch.t, ch.values[:, j]) for j in range(ch.width)]
        return splines[name]

    columns = []
    for entry in layout:
        if entry.startswith(DERIVATIVE_PREFIX):
            columns += [s.derivative(grid) for s in fitted(entry[len(DERIVATIVE_PREFIX):])]
            continue
        cols = [s(grid) for s in fitted(entry)]
        if log[entry].role == "quaternion":
            q = np.stack(cols, axis=1)
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            cols = list(q.T)
        columns += cols
    states = np.stack(columns, axis=1) if columns else np.zeros((n, 0))
    if actions:
        held = [zero_order_hold(log[a].t, log[a].values, grid[:-1]) for a in actions]
        action_arr = np.concatenate(held, axis=1)
    else:
        action_arr = np.zeros((n - 1, 0))
    return Trajectory(grid, states, action_arr)


def estimate_offset(log: SensorLog, reference: str, other: str, max_shift: float,
                    dt: float) -> float:
    """Heuristic time shift for ``other`` that best aligns it with ``reference``.

    Maximizes the normalized cross-correlation of the first components'
    spline derivatives over shifts in ``[-max_shift, max_shift]`` on a ``dt``
    grid. Returns the offset to pass to :func:`synchronize`.
    """
    ref, oth = log[reference], log[other]
    f_ref = fit_akima(ref.t, ref.values[:, 0])
    f_oth = fit_akima(oth.t, oth.values[:, 0])
    best, best_score = 0.0, -np.inf
    for shift in dt * np.arange(-int(round(max_shift / dt)), int(round(max_shift / dt)) + 1):
        lo = max(ref.t[0], oth.t[0] + shift)
        hi = min(ref.t[-1], oth.t[-1] + shift)
        if hi - lo < 4 * dt:
            continue
        grid = np.arange(lo, hi, dt)
        a = f_ref.derivative(grid)
        b = f_oth.derivative(np.clip(grid - shift, oth.t[0], oth.t[-1]))
        a = a - a.mean()
        b = b - b.mean()
        norm = np.linalg.norm(a) * np.linalg.norm(b)
        score = float(a @ b / norm) if norm > 0 else -np.inf
        if score > best_score:
            best, best_score = float(shift), score
    return best


# --- orientation residuals ---------------------------------------------------

def _unit(q, what):
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError(f"{what} quaternion has zero or non-finite norm")
    return q / norm


def quaternion_angle_residual(q_real, q_sim):
    """Rotation angle in [0, pi] between two orientations.

    Equals ``2 acos(|<q_real, q_sim>|)``, computed with ``atan2`` so that
    equal or antipodal inputs give exactly zero.
    """
    a = _unit(q_real, "real")
    b = _unit(q_sim, "simulated")
    sign = np.where(np.sum(a * b, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    b = b * sign
    alpha = 4.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))
    return alpha if np.ndim(alpha) else float(alpha)


def orientation_residual_states(replayed: np.ndarray, real: np.ndarray,
                                slots: Sequence[int]):
    """Collapse each embedded quaternion into its angle to the recorded one.

    Parameters
    ----------
    replayed : ndarray, shape (T, K, n)
    real : ndarray, shape (T, n)
    slots : first index of every quaternion block

    Returns
    -------
    replayed, real, alpha_index
        Reduced arrays with one angle entry per quaternion (0 in ``real``)
        and the positions of those entries.
    """
    slots = sorted(int(s) for s in slots)
    n = real.shape[-1]
    for a, b in zip(slots, slots[1:]):
        if b < a + 4:
            raise ValueError("quaternion slots overlap")
    if slots and (slots[0] < 0 or slots[-1] + 4 > n):
        raise ValueError(f"quaternion slots {slots} do not fit a {n}-dimensional state")
    rep_cols, real_cols, alpha_index = [], [], []
    col = 0
    for s in slots:
        rep_cols.append(replayed[..., col:s])
        real_cols.append(real[..., col:s])
        width = sum(c.shape[-1] for c in real_cols)
        alpha_index.append(width)
        q_real = real[..., None, s:s + 4]
        alpha = quaternion_angle_residual(q_real, replayed[..., s:s + 4])
        rep_cols.append(np.asarray(alpha)[..., None])
        real_cols.append(np.zeros(real.shape[:-1] + (1,)))
        col = s + 4
    rep_cols.append(replayed[..., col:])
    real_cols.append(real[..., col:])
    return (np.concatenate(rep_cols, axis=-1), np.concatenate(real_cols, axis=-1),
            alpha_index)


def symmetrize_orientation_samples(samples, alpha_index: Sequence[int]) -> np.ndarray:
    """Duplicate each sample with the sign of its angle entries flipped.

    Samples sit on axis -2; the output interleaves ``+alpha`` and ``-alpha``
    copies, doubling that axis.
    """
    samples = np.asarray(samples, dtype=float)
    mirrored = samples.copy()
    idx = list(alpha_index)
    mirrored[..., idx] = -samples[..., idx]
    out = np.stack([samples, mirrored], axis=-2)
    return out.reshape(samples.shape[:-2] + (2 * samples.shape[-2], samples.shape[-1]))
