"""Plain-text file formats: trajectories, raw sensor logs, results, parameter files."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DynamicsDistribution, ParameterSpace, Trajectory
from .preprocess import Channel, SensorLog


class FormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _rows(path: Path) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, next(csv.reader([stripped]))


def format_trajectory(traj: Trajectory, comments: Sequence[str] = ()) -> str:
    n, m = traj.state_dim, traj.action_dim
    out = io.StringIO()
    for c in comments:
        out.write(f"# {c}\n")
    header = ["t"] + [f"s_{i}" for i in range(n)] + [f"a_{j}" for j in range(m)]
    out.write(",".join(header) + "\n")
    for k in range(traj.states.shape[0]):
        row = [_fmt(traj.times[k])] + [_fmt(v) for v in traj.states[k]]
        if k < len(traj):
            row += [_fmt(v) for v in traj.actions[k]]
        else:
            row += [""] * m
        out.write(",".join(row) + "\n")
    return out.getvalue()


def write_trajectory(path, traj: Trajectory, comments: Sequence[str] = ()) -> None:
    Path(path).write_text(format_trajectory(traj, comments))


def read_trajectory(path) -> Trajectory:
    """Parse a trajectory file written by :func:`write_trajectory`."""
    path = Path(path)
    rows = iter(_rows(path))
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise FormatError(f"{path}: empty trajectory file") from None
    if not header or header[0] != "t":
        raise FormatError(f"{path}:{lineno}: header must start with 't'")
    n = sum(1 for h in header if h.startswith("s_"))
    m = sum(1 for h in header if h.startswith("a_"))
    expected = ["t"] + [f"s_{i}" for i in range(n)] + [f"a_{j}" for j in range(m)]
    if header != expected:
        raise FormatError(f"{path}:{lineno}: unexpected header {header}")
    times, states, actions = [], [], []
    last_line = lineno
    for lineno, row in rows:
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            times.append(float(row[0]))
            states.append([float(v) for v in row[1:1 + n]])
            acts = row[1 + n:]
            if all(a == "" for a in acts) and m:
                actions.append(None)
            else:
                actions.append([float(v) for v in acts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        last_line = lineno
    if len(times) < 2:
        raise FormatError(f"{path}: a trajectory needs at least two rows")
    if m and (actions[-1] is not None or any(a is None for a in actions[:-1])):
        raise FormatError(f"{path}:{last_line}: only the final row may have empty action fields")
    try:
        return Trajectory(times, states, np.array(actions[:-1], dtype=float).reshape(-1, m))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- raw sensor logs -----------------------------------------------------------

def format_raw_log(log: SensorLog) -> str:
    """Long format: one ``channel,t,v_0,...`` row per sample, channels in order."""
    out = io.StringIO()
    out.write("channel,t,values\n")
    for name, ch in log.channels.items():
        for t, vals in zip(ch.t, ch.values):
            out.write(",".join([name, _fmt(t)] + [_fmt(v) for v in vals]) + "\n")
    return out.getvalue()


def write_raw_log(path, log: SensorLog) -> None:
    Path(path).write_text(format_raw_log(log))


def read_raw_log(path, roles: Mapping[str, str]) -> SensorLog:
    """Read a long-format log; ``roles`` maps every channel name to its role."""
    path = Path(path)
    data: dict[str, tuple[list[float], list[list[float]]]] = {}
    rows = iter(_rows(path))
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise FormatError(f"{path}: empty log") from None
    if header[:2] != ["channel", "t"]:
        raise FormatError(f"{path}:{lineno}: header must start with 'channel,t'")
    for lineno, row in rows:
        if len(row) < 3:
            raise FormatError(f"{path}:{lineno}: row needs a channel, a time and a value")
        name = row[0]
        if name not in roles:
            raise FormatError(f"{path}:{lineno}: channel {name!r} has no configured role")
        try:
            t = float(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        ts, vs = data.setdefault(name, ([], []))
        if vs and len(vals) != len(vs[0]):
            raise FormatError(f"{path}:{lineno}: channel {name!r} changed width")
        if ts and t <= ts[-1]:
            raise FormatError(f"{path}:{lineno}: timestamps of {name!r} must increase")
        ts.append(t)
        vs.append(vals)
    missing = [n for n in roles if n not in data]
    if missing:
        raise FormatError(f"{path}: configured channels missing from the log: {missing}")
    try:
        return SensorLog({n: Channel(data[n][0], data[n][1], roles[n]) for n in roles})
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- JSON documents ------------------------------------------------------------

def dump_json(path, doc: Mapping) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_params(path, space: ParameterSpace):
    """Load replay parameters from a ground-truth sidecar, result or params file.

    Returns a :class:`DynamicsDistribution` when the document carries means and
    stds, else a plain vector of point values.
    """
    doc = load_json(path)
    names = doc.get("names")
    if names is not None and tuple(names) != space.names:
        raise FormatError(f"{path}: parameters {names} do not match {list(space.names)}")

    def vector(key):
        vals = doc[key]
        if isinstance(vals, Mapping):
            vals = [vals[n] for n in space.names]
        if len(vals) != space.dim:
            raise FormatError(f"{path}: '{key}' needs {space.dim} entries")
        return np.array(vals, dtype=float)

    if "values" in doc:
        return vector("values")
    if "mean" in doc and "std" in doc:
        return DynamicsDistribution(space, vector("mean"), vector("std"))
    raise FormatError(f"{path}: expected 'values' or 'mean' and 'std'")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[float]]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else _fmt(v) if isinstance(v, float)
                              else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
