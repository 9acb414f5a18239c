"""Command-line front end: ``dropo {gen,preprocess,fit,tune-epsilon,replay}``.

Exit status: 0 success, 1 usage or configuration error, 2 threshold
unreachable, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cmaes import OptimizationError
from .config import ConfigError, RunConfig, load_config
from .core import DynamicsDistribution, FitResult, TransitionDataset, build_dataset
from .io import (FormatError, dump_json, read_params, read_raw_log, read_trajectory, write_csv,
                 write_trajectory)
from .likelihood import LikelihoodError, squared_errors
from .optimize import OBJECTIVES, fit, tune_epsilon
from .preprocess import resample_to_timestep, synchronize
from .sim import InvalidParameters, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_UNREACHABLE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dropo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config, seed=args.seed, objective=getattr(args, "objective", None))
    return cfg.with_workers(args.workers)


def _load_dataset(paths, cfg: RunConfig) -> tuple[TransitionDataset, list[str]]:
    sim = cfg.sim
    trajs = []
    for p in paths:
        traj = read_trajectory(p)
        if traj.state_dim != sim.state_dim or traj.action_dim != sim.action_dim:
            raise UsageError(f"{p}: dimension mismatch, file has state/action dims "
                             f"{traj.state_dim}/{traj.action_dim}, {sim.sim_id} expects "
                             f"{sim.state_dim}/{sim.action_dim}")
        trajs.append(traj)
    try:
        dataset = build_dataset(trajs, cfg.likelihood.horizon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return dataset, [Path(p).name for p in paths]


def _result_doc(res: FitResult, cfg: RunConfig, data: list[str], trace_name: str) -> dict:
    phi = res.phi_star
    return {
        "tool": "dropo",
        "version": __version__,
        "objective": res.objective,
        "seed": res.seed,
        "names": list(phi.space.names),
        "mean": phi.mean.tolist(),
        "std": phi.std.tolist(),
        "epsilon": res.epsilon.tolist(),
        "mse": res.mse,
        "mse_per_transition": res.mse_per_transition,
        "n_transitions": res.n_transitions,
        "evaluations": res.evaluations,
        "stop": res.stop,
        "trace": trace_name,
        "data": data,
        "config": cfg.echo,
    }


def _write_trace(path: Path, res: FitResult) -> None:
    sign = -1.0 if res.objective == "dropo" else 1.0
    column = "best_log_likelihood" if res.objective == "dropo" else "best_l2"
    mse = res.mse_trace if res.mse_trace else [float("nan")] * len(res.objective_trace)
    rows = [(g, sign * f, m) for g, (f, m) in enumerate(zip(res.objective_trace, mse))]
    write_csv(path, ["generation", column, "mse"], rows)


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# --- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    if cfg.generation is None:
        raise UsageError("gen needs a 'generation' section in the config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg.generation)
    names = []
    for i, traj in enumerate(data.trajectories):
        name = f"traj_{i:03d}.csv"
        write_trajectory(out / name, traj,
                         comments=[f"simulator {cfg.sim.sim_id}, dt {cfg.sim.dt!r}",
                                   f"seed {cfg.seed}, trajectory {i}"])
        names.append(name)
    sidecar = data.sidecar()
    sidecar.update({"trajectories": names, "version": __version__, "config": cfg.echo})
    dump_json(out / "ground_truth.json", sidecar)
    print(f"wrote {len(names)} trajectories and ground_truth.json to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    pre = cfg.preprocess
    if pre is None:
        raise UsageError("preprocess needs a 'preprocess' section in the config")
    raw = read_raw_log(args.raw, pre.roles)
    try:
        traj = resample_to_timestep(synchronize(raw, pre.offsets), pre.dt, pre.state, pre.actions)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_trajectory(args.out, traj, comments=[f"resampled from {Path(args.raw).name} at "
                                               f"dt {pre.dt!r}"])
    print(f"wrote {len(traj)} transitions to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    base = _config(args)
    dataset, names = _load_dataset(args.data, base)
    out = Path(args.out)
    seeds = [base.seed + i for i in range(args.repeat)]
    for seed in seeds:
        cfg = base
        target = out
        if args.repeat > 1:
            cfg = load_config(args.config, seed=seed, objective=args.objective).with_workers(
                args.workers)
            target = _sibling(out, f"_seed{seed}.json")
        res = fit(dataset, cfg.sim, cfg.fit)
        trace = _sibling(target, ".trace.csv")
        _write_trace(trace, res)
        dump_json(target, _result_doc(res, cfg, names, trace.name))
        phi = res.phi_star
        print(f"seed {seed}: {res.objective} fit, {res.evaluations} evaluations ({res.stop})")
        for n, m, s in zip(phi.space.names, phi.mean, phi.std):
            print(f"  {n:>8s}  mean {m:.10g}  std {s:.4g}")
        print(f"  mse {res.mse:.6g}  -> {target}")
    return EXIT_OK


def cmd_tune_epsilon(args) -> int:
    cfg = _config(args)
    if cfg.tuning is None:
        raise UsageError("tune-epsilon needs a 'tuning' section in the config")
    if cfg.fit.objective != "dropo":
        raise UsageError("epsilon tuning applies to the dropo objective only")
    dataset, names = _load_dataset(args.data, cfg)
    sweep = tune_epsilon(dataset, cfg.sim, cfg.fit, cfg.tuning.candidates, cfg.tuning.tau)
    out = Path(args.out)
    sweep_path = _sibling(out, ".sweep.csv")
    write_csv(sweep_path, ["epsilon", "total_variance", "mse"], sweep.rows())
    doc = {"tool": "dropo", "version": __version__, "tau": sweep.tau,
           "selected_epsilon": sweep.selected, "sweep": sweep_path.name}
    if sweep.reachable:
        res = sweep.results[sweep.epsilons.index(sweep.selected)]
        trace = _sibling(out, ".trace.csv")
        _write_trace(trace, res)
        doc.update(_result_doc(res, cfg, names, trace.name))
    else:
        doc.update({"status": "threshold unreachable", "data": names, "config": cfg.echo})
    dump_json(out, doc)
    for eps, tv, mse in sweep.rows():
        mark = "  <- selected" if eps == sweep.selected else ""
        print(f"epsilon {eps:<8.3g} total variance {tv:.4g}  mse {mse:.4g}{mark}")
    if not sweep.reachable:
        print(f"threshold unreachable: no candidate reached mse < {sweep.tau!r}", file=sys.stderr)
        return EXIT_UNREACHABLE
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _config(args)
    if not Path(args.params).is_file():
        raise UsageError(f"params file {args.params} does not exist")
    dataset, _ = _load_dataset(args.data, cfg)
    sim, lcfg = cfg.sim, cfg.likelihood
    params = read_params(args.params, sim.param_space)
    if isinstance(params, DynamicsDistribution):
        errors = squared_errors(params, dataset, sim, lcfg)
    else:
        point = sim.param_space.point(params)
        errors = squared_errors(point, dataset, sim, lcfg, samples=params[None, :])
    per_transition = errors.sum(axis=1)
    total = 0.0
    for i, value in enumerate(per_transition):
        print(f"transition {i}: {float(value)!r}")
        total += value
    print(f"total d_D: {float(total)!r}")
    if args.out:
        header = ["transition"] + [f"e_{j}" for j in range(errors.shape[1])]
        write_csv(args.out, header, ([i] + row.tolist() for i, row in enumerate(errors)))
    return EXIT_OK


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dropo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--workers", type=int, default=1,
                       help="replay threads; results do not depend on it")
        if needs_out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="generate synthetic trajectories and a ground-truth record")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("preprocess", help="synchronize and resample a raw sensor log")
    p.add_argument("raw")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="fit a dynamics distribution to trajectories")
    p.add_argument("data", nargs="+")
    common(p)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--repeat", type=int, default=1,
                   help="run consecutive seeds and write one result per seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune-epsilon", help="sweep epsilon and select the smallest meeting tau")
    p.add_argument("data", nargs="+")
    common(p)
    p.set_defaults(func=cmd_tune_epsilon)

    p = sub.add_parser("replay", help="report replay errors for given parameters")
    p.add_argument("data", nargs="+")
    common(p, needs_out=False)
    p.add_argument("--params", required=True,
                   help="JSON with 'values', or 'mean' and 'std' (result files qualify)")
    p.add_argument("--out", help="optional per-dimension error CSV")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    if getattr(args, "repeat", 1) < 1:
        parser.error("--repeat must be at least 1")
    try:
        return args.func(args)
    except (LikelihoodError, OptimizationError, InvalidParameters, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"dropo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, ValueError, KeyError) as exc:
        print(f"dropo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dropo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
