"""Strict YAML run configuration.

Every section is optional except ``simulator``. Unknown keys are errors, and
numbers written in forms YAML leaves as strings (``1e-8``) are coerced.
Errors name the offending key path and, where known, its line.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml

from .core import DEFAULT_STD_MIN, DynamicsDistribution, ParameterSpace
from .likelihood import LikelihoodConfig
from .optimize import OBJECTIVES, SAMPLE_SETS, FitConfig
from .preprocess import ROLES
from .sim import EXCITATIONS, SIMULATORS, DataGenConfig, Simulator, make_simulator


class ConfigError(ValueError):
    pass


def _line_map(text: str) -> dict[tuple[str, ...], int]:
    """1-based line of every mapping key, by key path."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (str(k.value),)
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, ())
    return lines


class _Reader:
    def __init__(self, source: str, lines: Mapping[tuple[str, ...], int]):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple[str, ...], message: str):
        probe = path
        while probe and probe not in self.lines:
            probe = probe[:-1]
        where = f"{self.source}:{self.lines[probe]}" if probe else self.source
        key = ".".join(path) or "<root>"
        raise ConfigError(f"{where}: {key}: {message}")

    def section(self, tree, path, allowed) -> dict:
        if tree is None:
            return {}
        if not isinstance(tree, Mapping):
            self.fail(path, "expected a mapping")
        for key in tree:
            if str(key) not in allowed:
                self.fail(path + (str(key),), f"unknown key (allowed: {', '.join(allowed)})")
        return {str(k): v for k, v in tree.items()}

    def number(self, value, path, kind: Callable = float, low=None, strict_low=False):
        if isinstance(value, bool):
            self.fail(path, f"expected a number, got {value!r}")
        try:
            if kind is int:
                as_float = float(value)
                if not as_float.is_integer():
                    raise ValueError
                out = int(as_float)
            else:
                out = float(value)
        except (TypeError, ValueError):
            self.fail(path, f"expected {'an integer' if kind is int else 'a number'}, got {value!r}")
        if not np.isfinite(out):
            self.fail(path, "must be finite")
        if low is not None and (out <= low if strict_low else out < low):
            self.fail(path, f"must be {'>' if strict_low else '>='} {low}")
        return out

    def numbers(self, value, path, low=None) -> list[float]:
        if isinstance(value, (list, tuple)):
            return [self.number(v, path + (str(i),), low=low) for i, v in enumerate(value)]
        return [self.number(value, path, low=low)]

    def by_name(self, tree, path, names, low=None, required=False) -> dict[str, float]:
        tree = self.section(tree, path, names)
        if required:
            missing = [n for n in names if n not in tree]
            if missing:
                self.fail(path, f"missing values for {missing}")
        return {k: self.number(v, path + (k,), low=low) for k, v in tree.items()}

    def choice(self, value, path, options):
        if value not in options:
            self.fail(path, f"expected one of {list(options)}, got {value!r}")
        return value

    def names(self, value, path) -> list[str]:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            self.fail(path, "expected a list of names")
        return list(value)


@dataclass(frozen=True)
class PreprocessConfig:
    dt: float
    roles: dict[str, str]
    offsets: dict[str, float]
    state: list[str] | None
    actions: list[str] | None


@dataclass(frozen=True)
class TuningConfig:
    candidates: list[float]
    tau: float


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration; ``echo`` is its fully resolved, re-loadable tree."""

    sim: Simulator
    seed: int
    fit: FitConfig
    generation: DataGenConfig | None
    preprocess: PreprocessConfig | None
    tuning: TuningConfig | None
    echo: dict = field(compare=False)

    @property
    def likelihood(self) -> LikelihoodConfig:
        return self.fit.likelihood

    def with_workers(self, workers: int) -> "RunConfig":
        """Concurrency cap; deliberately absent from the echo since results do not depend on it."""
        return replace(self, fit=replace(self.fit, likelihood=replace(self.likelihood,
                                                                      workers=workers)))


TOP_KEYS = ("seed", "simulator", "parameters", "likelihood", "optimizer", "generation",
            "preprocess", "tuning")


def parse_config(tree, source: str = "<config>", lines=None, seed: int | None = None,
                 objective: str | None = None) -> RunConfig:
    """Validate a raw config tree; ``seed`` and ``objective`` override the file."""
    r = _Reader(source, lines or {})
    top = r.section(tree, (), TOP_KEYS)
    if "simulator" not in top:
        r.fail(("simulator",), "section is required")
    echo: dict[str, Any] = {}

    if seed is None:
        seed = r.number(top.get("seed", 0), ("seed",), int, low=0)
    elif seed < 0:
        raise ConfigError("--seed must be non-negative")
    echo["seed"] = seed

    # simulator
    p = ("simulator",)
    s = r.section(top["simulator"], p, ("id", "dt", "fixed"))
    sim_id = r.choice(s.get("id"), p + ("id",), sorted(SIMULATORS))
    dt = r.number(s.get("dt", 0.01), p + ("dt",), low=0, strict_low=True)
    cls = SIMULATORS[sim_id]
    fixed = r.by_name(s.get("fixed"), p + ("fixed",), cls.param_names)

    # parameter space
    p = ("parameters",)
    ps = r.section(top.get("parameters"), p, ("std_min", "bounds"))
    std_min = r.number(ps.get("std_min", DEFAULT_STD_MIN), p + ("std_min",), low=0,
                       strict_low=True)
    try:
        sim = make_simulator(sim_id, dt=dt, fixed=fixed, std_min=std_min)
    except (KeyError, ValueError) as exc:
        r.fail(("simulator",), str(exc))
    base = sim.param_space
    free = base.names
    bounds = r.section(ps.get("bounds"), p + ("bounds",), free)
    lower, upper = base.lower.copy(), base.upper.copy()
    validity, std_max = base.validity_lower.copy(), base.std_max.copy()
    explicit_std_max = np.zeros(len(free), dtype=bool)
    for name, entry in bounds.items():
        q = p + ("bounds", name)
        e = r.section(entry, q, ("lower", "upper", "validity_lower", "std_max"))
        i = free.index(name)
        if "lower" in e:
            lower[i] = r.number(e["lower"], q + ("lower",))
        if "upper" in e:
            upper[i] = r.number(e["upper"], q + ("upper",))
        if "validity_lower" in e:
            validity[i] = r.number(e["validity_lower"], q + ("validity_lower",))
        if "std_max" in e:
            std_max[i] = r.number(e["std_max"], q + ("std_max",), low=0, strict_low=True)
            explicit_std_max[i] = True
    std_max = np.where(explicit_std_max, std_max, (upper - lower) / 4)
    try:
        space = ParameterSpace(free, lower, upper, validity, std_min, std_max)
        sim = sim.with_space(space)
    except ValueError as exc:
        r.fail(p, str(exc))
    echo["simulator"] = {"id": sim_id, "dt": dt, "fixed": dict(sim.fixed)}
    echo["parameters"] = {
        "std_min": std_min,
        "bounds": {n: {"lower": float(lower[i]), "upper": float(upper[i]),
                       "validity_lower": float(validity[i]), "std_max": float(std_max[i])}
                   for i, n in enumerate(free)}}

    # likelihood
    p = ("likelihood",)
    lk = r.section(top.get("likelihood"), p, ("K", "horizon", "epsilon", "orientation_slots"))
    eps = r.numbers(lk.get("epsilon", 1e-5), p + ("epsilon",), low=0)
    slots = lk.get("orientation_slots", [])
    if not isinstance(slots, list):
        r.fail(p + ("orientation_slots",), "expected a list of state indices")
    slots = [r.number(v, p + ("orientation_slots", str(i)), int, low=0)
             for i, v in enumerate(slots)]
    for i, slot in enumerate(slots):
        if slot + 4 > sim.state_dim:
            r.fail(p + ("orientation_slots", str(i)), f"slot {slot} exceeds the state dimension")
    try:
        lcfg = LikelihoodConfig(K=r.number(lk.get("K", 100), p + ("K",), int, low=2),
                                epsilon=eps[0] if len(eps) == 1 else tuple(eps),
                                horizon=r.number(lk.get("horizon", 1), p + ("horizon",), int,
                                                 low=1),
                                seed=seed, orientation_slots=tuple(slots))
        lcfg.epsilon_vector(sim.state_dim - 3 * len(slots))
    except ValueError as exc:
        r.fail(p, str(exc))
    echo["likelihood"] = {"K": lcfg.K, "horizon": lcfg.horizon,
                          "epsilon": eps[0] if len(eps) == 1 else eps,
                          "orientation_slots": slots}

    # optimizer
    p = ("optimizer",)
    op = r.section(top.get("optimizer"), p, ("objective", "budget", "stagnation_generations",
                                             "stagnation_tol", "sigma0", "popsize", "restarts",
                                             "sample_sets", "phi_init"))
    obj = objective or op.get("objective", "dropo")
    r.choice(obj, p + ("objective",), OBJECTIVES)
    budget = r.number(op.get("budget", 3000), p + ("budget",), int, low=1)
    stag_g = r.number(op.get("stagnation_generations", 20), p + ("stagnation_generations",),
                      int, low=1)
    stag_tol = r.number(op.get("stagnation_tol", 1e-8), p + ("stagnation_tol",))
    sigma0 = r.number(op.get("sigma0", 1.0), p + ("sigma0",), low=0, strict_low=True)
    restarts = r.number(op.get("restarts", 0), p + ("restarts",), int, low=0)
    sample_sets = r.choice(op.get("sample_sets", "fixed"), p + ("sample_sets",), SAMPLE_SETS)
    popsize = op.get("popsize")
    if popsize is not None:
        popsize = r.number(popsize, p + ("popsize",), int, low=2)
    phi_init = None
    init_echo = None
    if op.get("phi_init") is not None:
        q = p + ("phi_init",)
        pi = r.section(op["phi_init"], q, ("mean", "std"))
        mid = space.midpoint()
        means = r.by_name(pi.get("mean"), q + ("mean",), free)
        stds = r.by_name(pi.get("std"), q + ("std",), free, low=0)
        mean = np.array([means.get(n, mid.mean[i]) for i, n in enumerate(free)])
        std = np.array([stds.get(n, mid.std[i]) for i, n in enumerate(free)])
        phi_init = DynamicsDistribution(space, mean, std)
        init_echo = {"mean": dict(zip(free, mean.tolist())), "std": dict(zip(free, std.tolist()))}
    try:
        fcfg = FitConfig(likelihood=lcfg, objective=obj, budget=budget,
                         stagnation_generations=stag_g, stagnation_tol=stag_tol,
                         phi_init=phi_init, sigma0=sigma0, popsize=popsize, track_mse=True,
                         restarts=restarts, sample_sets=sample_sets)
    except ValueError as exc:
        r.fail(p, str(exc))
    echo["optimizer"] = {"objective": obj, "budget": budget, "stagnation_generations": stag_g,
                         "stagnation_tol": stag_tol, "sigma0": sigma0, "popsize": popsize,
                         "restarts": restarts, "sample_sets": sample_sets,
                         "phi_init": init_echo}

    # generation
    gen = None
    if top.get("generation") is not None:
        p = ("generation",)
        g = r.section(top["generation"], p, ("ground_truth", "resample_every", "excitation",
                                             "noise_std", "transitions", "trajectories"))
        q = p + ("ground_truth",)
        gt_tree = r.section(g.get("ground_truth"), q, ("values", "mean", "std"))
        nominal = dict(zip(sim.param_names, sim.nominal))
        if "values" in gt_tree:
            if "mean" in gt_tree or "std" in gt_tree:
                r.fail(q, "give either 'values' or 'mean' and 'std'")
            vals = r.by_name(gt_tree["values"], q + ("values",), free)
            truth = np.array([vals.get(n, nominal[n]) for n in free])
            gt_echo = {"values": dict(zip(free, truth.tolist()))}
        elif "mean" in gt_tree or "std" in gt_tree:
            means = r.by_name(gt_tree.get("mean"), q + ("mean",), free)
            stds = r.by_name(gt_tree.get("std"), q + ("std",), free, low=0, required=True)
            mean = np.array([means.get(n, nominal[n]) for n in free])
            std = np.array([stds[n] for n in free])
            truth = DynamicsDistribution(space, mean, std)
            gt_echo = {"mean": dict(zip(free, mean.tolist())), "std": dict(zip(free, std.tolist()))}
        else:
            truth = np.array([nominal[n] for n in free])
            gt_echo = {"values": dict(zip(free, truth.tolist()))}
        excitation = g.get("excitation")
        if excitation is not None:
            r.choice(excitation, p + ("excitation",), EXCITATIONS)
        noise = r.numbers(g.get("noise_std", 0.0), p + ("noise_std",), low=0)
        if len(noise) not in (1, sim.state_dim):
            r.fail(p + ("noise_std",), f"expected 1 or {sim.state_dim} values")
        try:
            gen = DataGenConfig(
                sim, truth,
                resample_every=r.number(g.get("resample_every", 0), p + ("resample_every",),
                                        int, low=0),
                excitation=excitation, noise_std=noise[0] if len(noise) == 1 else noise,
                transitions=r.number(g.get("transitions", 200), p + ("transitions",), int, low=1),
                trajectories=r.number(g.get("trajectories", 1), p + ("trajectories",), int,
                                      low=1),
                seed=seed)
        except ValueError as exc:
            r.fail(p, str(exc))
        echo["generation"] = {"ground_truth": gt_echo, "resample_every": gen.resample_every,
                              "excitation": gen.excitation,
                              "noise_std": noise[0] if len(noise) == 1 else noise,
                              "transitions": gen.transitions, "trajectories": gen.trajectories}

    # preprocessing
    pre = None
    if top.get("preprocess") is not None:
        p = ("preprocess",)
        pp = r.section(top["preprocess"], p, ("dt", "channels", "offsets", "state", "actions"))
        channels = pp.get("channels")
        if not isinstance(channels, Mapping) or not channels:
            r.fail(p + ("channels",), "map every channel name to one of " + ", ".join(ROLES))
        roles = {str(k): r.choice(v, p + ("channels", str(k)), ROLES) for k, v in channels.items()}
        offsets = r.by_name(pp.get("offsets"), p + ("offsets",), tuple(roles))
        state = actions = None
        if pp.get("state") is not None:
            state = r.names(pp["state"], p + ("state",))
            for entry in state:
                base_name = entry.split(":", 1)[1] if entry.startswith("dot:") else entry
                if base_name not in roles:
                    r.fail(p + ("state",), f"unknown channel {base_name!r}")
        if pp.get("actions") is not None:
            actions = r.names(pp["actions"], p + ("actions",))
            for name in actions:
                if name not in roles:
                    r.fail(p + ("actions",), f"unknown channel {name!r}")
        pre = PreprocessConfig(
            dt=r.number(pp.get("dt", dt), p + ("dt",), low=0, strict_low=True),
            roles=roles, offsets=offsets, state=state, actions=actions)
        echo["preprocess"] = {"dt": pre.dt, "channels": roles, "offsets": offsets,
                              "state": state, "actions": actions}

    # tuning
    tune = None
    if top.get("tuning") is not None:
        p = ("tuning",)
        t = r.section(top["tuning"], p, ("candidates", "tau"))
        if "candidates" not in t or "tau" not in t:
            r.fail(p, "needs 'candidates' and 'tau'")
        cands = r.numbers(t["candidates"], p + ("candidates",), low=0)
        if not cands:
            r.fail(p + ("candidates",), "must not be empty")
        tune = TuningConfig(cands, r.number(t["tau"], p + ("tau",), low=0))
        echo["tuning"] = {"candidates": cands, "tau": tune.tau}

    return RunConfig(sim=sim, seed=seed, fit=fcfg, generation=gen, preprocess=pre,
                     tuning=tune, echo=echo)


def load_config(path, seed: int | None = None, objective: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(tree, str(path), _line_map(text), seed=seed, objective=objective)
