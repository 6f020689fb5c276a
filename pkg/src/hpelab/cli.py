"""Command-line front end: simulate, degrade, train, evaluate, analyze.

Every command that produces artifacts writes them under --out together with
a ``run.json`` record (command, materialized config, seeds, wall time,
library versions) so a run can be audited or replayed. Config files are
strict JSON: unknown keys are rejected rather than ignored.

Exit codes: 0 success, 2 bad usage or config, 3 runtime failure (numerical
blow-up, unreadable files).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .fields import FieldError, GridSpec, RealField
from .simulate import (
    NoiseSpec,
    NumericError,
    PhysParams,
    SystemKind,
    add_noise,
    initial_condition,
    integrate,
    sample_sparse,
    to_modulus,
)
from .storage import (
    StorageError,
    load_checkpoint,
    read_csv,
    read_field,
    read_trajectory,
    render_pgm,
    save_checkpoint,
    write_csv,
    write_field,
    write_trajectory,
)


class ConfigError(ValueError):
    """Malformed or contradictory run configuration."""


# ----- config plumbing -----


def _reject_unknown(data: dict, allowed, where: str) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _dataclass_from(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(data, names, where)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def load_config(path, schema: dict, where: str = "config") -> dict:
    """JSON object checked against a {key: default} schema.

    Defaults are materialized so the run record always shows the full
    effective configuration.
    """
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(data, schema, where)
    merged = dict(schema)
    merged.update(data)
    missing = [k for k, v in merged.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"missing required {where} keys: {sorted(missing)}")
    return merged


_REQUIRED = object()


def _enum(kind, value, where: str):
    """Map a config string onto an enum member, as a config error."""
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def write_run_record(outdir: Path, command: str, config: dict, **extra) -> Path:
    record = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()
        ).hexdigest(),
        "versions": {
            "hpelab": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "hpe_threads": os.environ.get("HPE_THREADS", "1"),
    }
    record.update(extra)
    path = outdir / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----- commands -----

_SIM_SCHEMA = {
    "system": _REQUIRED,
    "nx": 64, "ny": 64, "dx": 1.0, "dy": 1.0,
    "t_end": 20.0, "dt": 0.002, "save_every": 5,
    "seed": 0,
    "params": {},
}


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _SIM_SCHEMA)
    params = _dataclass_from(PhysParams, cfg["params"], "params")
    cfg["params"] = dataclasses.asdict(params)
    system = _enum(SystemKind, cfg["system"], "system")
    grid = GridSpec(cfg["nx"], cfg["ny"], dx=cfg["dx"], dy=cfg["dy"])
    out = _outdir(args)
    t0 = time.time()
    ic = initial_condition(system, cfg["seed"], grid=grid)
    traj = integrate(
        ic, system, params=params, t_end=cfg["t_end"], dt=cfg["dt"],
        save_every=cfg["save_every"], seed=cfg["seed"],
    )
    write_trajectory(out / "trajectory", traj)
    write_run_record(
        out, "simulate", cfg,
        wall_seconds=time.time() - t0,
        outputs=["trajectory"],
        n_snapshots=len(traj.snapshots),
    )
    print(f"wrote {len(traj.snapshots)} snapshots to {out / 'trajectory'}")
    return 0


def cmd_degrade(args) -> int:
    out = _outdir(args)
    t0 = time.time()
    traj = read_trajectory(args.traj)
    if traj.system is SystemKind.CGL:
        traj = to_modulus(traj)
    if args.t_max is not None:
        from .training import truncate_time

        traj = truncate_time(traj, args.t_max)
    obs = sample_sparse(traj, args.dt_obs)
    obs = add_noise(obs, NoiseSpec(sigma=args.sigma, seed=args.seed))
    write_trajectory(out / "observations", obs)
    cfg = {
        "dt_obs": args.dt_obs, "sigma": args.sigma,
        "seed": args.seed, "t_max": args.t_max,
    }
    write_run_record(
        out, "degrade", cfg,
        wall_seconds=time.time() - t0,
        outputs=["observations"],
        n_snapshots=len(obs.snapshots),
    )
    print(f"wrote {len(obs.snapshots)} observations to {out / 'observations'}")
    return 0


_TRAIN_SCHEMA = {
    "scenario": _REQUIRED,
    "system": "ch",
    "dt": 0.01,
    "seed": 0,
    "params": {},
    "afno": {},
    "training": {},
}


def cmd_train(args) -> int:
    from .hpe import ScenarioKind, build_model
    from .training import TrainConfig, train

    cfg = load_config(args.config, _TRAIN_SCHEMA)
    params = _dataclass_from(PhysParams, cfg["params"], "params")
    tc = _dataclass_from(TrainConfig, cfg["training"], "training")
    cfg["params"] = dataclasses.asdict(params)
    cfg["training"] = dataclasses.asdict(tc)
    out = _outdir(args)
    t0 = time.time()
    obs = read_trajectory(args.obs)
    model = build_model(
        _enum(ScenarioKind, cfg["scenario"], "scenario"),
        grid=obs.grid,
        system=_enum(SystemKind, cfg["system"], "system"),
        dt=cfg["dt"],
        phys=params,
        seed=cfg["seed"],
        afno_overrides=cfg["afno"] or None,
    )
    model, history = train(model, obs, config=tc)
    save_checkpoint(out / "model.ckpt", model)
    write_csv(out / "history.csv", ["epoch", "loss"],
              [[i, v] for i, v in enumerate(history)])
    write_run_record(
        out, "train", cfg,
        wall_seconds=time.time() - t0,
        outputs=["model.ckpt", "history.csv"],
        final_loss=float(history[-1]),
        epochs_run=len(history),
    )
    print(f"trained {len(history)} epochs, final loss {history[-1]:.6g}")
    return 0


def cmd_evaluate(args) -> int:
    from .training import evaluate

    out = _outdir(args)
    t0 = time.time()
    model = load_checkpoint(args.model)
    truth = read_trajectory(args.truth)
    if truth.system is SystemKind.CGL:
        truth = to_modulus(truth)
    ic = truth.snapshots[0]
    report = evaluate(model, ic, truth, t_split=args.t_split)
    write_csv(out / "rmse_curve.csv", ["time", "rmse"],
              list(zip(report.times, report.rmse_per_time)))
    cfg = {"t_split": args.t_split}
    write_run_record(
        out, "evaluate", cfg,
        wall_seconds=time.time() - t0,
        outputs=["rmse_curve.csv"],
        interp_rmse=report.interp_avg,
        extrap_rmse=report.extrap_avg,
    )
    print(f"interp {report.interp_avg:.6g}  extrap {report.extrap_avg:.6g}")
    return 0


_SWEEP_SCHEMA = {
    "scenario": _REQUIRED,
    "system": "ch",
    "nx": 64, "ny": 64,
    "dt_obs_list": _REQUIRED,
    "sigma_list": _REQUIRED,
    "seeds": _REQUIRED,
    "t_end": 20.0, "t_obs_end": 9.0,
    "dt_solver": 0.002, "save_every": 5, "model_dt": 0.01,
    "params": {},
    "afno": {},
    "training": {},
}


def cmd_sweep(args) -> int:
    from .hpe import ScenarioKind
    from .training import TrainConfig, robustness_sweep

    cfg = load_config(args.config, _SWEEP_SCHEMA)
    params = _dataclass_from(PhysParams, cfg["params"], "params")
    tc = _dataclass_from(TrainConfig, cfg["training"], "training")
    cfg["params"] = dataclasses.asdict(params)
    cfg["training"] = dataclasses.asdict(tc)
    out = _outdir(args)
    t0 = time.time()
    cells = robustness_sweep(
        _enum(ScenarioKind, cfg["scenario"], "scenario"),
        dt_obs_list=cfg["dt_obs_list"],
        sigma_list=cfg["sigma_list"],
        seeds=cfg["seeds"],
        system=_enum(SystemKind, cfg["system"], "system"),
        grid=GridSpec(cfg["nx"], cfg["ny"]),
        phys=params,
        t_end=cfg["t_end"],
        t_obs_end=cfg["t_obs_end"],
        dt_solver=cfg["dt_solver"],
        save_every=cfg["save_every"],
        model_dt=cfg["model_dt"],
        train_config=tc,
        afno_overrides=cfg["afno"] or None,
    )
    write_csv(
        out / "sweep.csv",
        ["dt_obs", "sigma", "interp_rmse", "extrap_rmse", "n_runs"],
        [[c.dt_obs, c.sigma, c.interp_avg, c.extrap_avg, c.n_runs] for c in cells],
    )
    write_run_record(
        out, "sweep", cfg,
        wall_seconds=time.time() - t0,
        outputs=["sweep.csv"],
        n_cells=len(cells),
    )
    print(f"swept {len(cells)} cells -> {out / 'sweep.csv'}")
    return 0


def cmd_bin(args) -> int:
    from .discovery import bin_analysis, channel_samples

    out = _outdir(args)
    t0 = time.time()
    model = load_checkpoint(args.model)
    traj = read_trajectory(args.traj)
    if traj.system is SystemKind.CGL:
        traj = to_modulus(traj)
    c, y = channel_samples(
        model, traj, channel=args.channel, t_min=args.t_min, t_max=args.t_max
    )
    table = bin_analysis(c, y, n_bins=args.bins, min_count=args.min_count)
    write_csv(out / "bins.csv", ["center", "mean", "count"],
              list(zip(table.centers, table.means, table.counts)))
    cfg = {
        "channel": args.channel, "bins": args.bins,
        "t_min": args.t_min, "t_max": args.t_max, "min_count": args.min_count,
    }
    write_run_record(
        out, "bin", cfg,
        wall_seconds=time.time() - t0,
        outputs=["bins.csv"],
        n_bins_kept=len(table.centers),
        n_samples=int(c.size),
    )
    print(f"kept {len(table.centers)} bins from {c.size} samples")
    return 0


def cmd_discover(args) -> int:
    from .discovery import BinTable, DSRConfig, TokenLibrary, discover

    out = _outdir(args)
    t0 = time.time()
    header, rows = read_csv(args.bins)
    if header[:2] != ["center", "mean"]:
        raise StorageError(f"{args.bins} is not a bin table (header {header})")
    centers = np.array([float(r[0]) for r in rows])
    means = np.array([float(r[1]) for r in rows])
    counts = (
        np.array([int(float(r[2])) for r in rows])
        if len(header) > 2
        else np.full(len(rows), 10**9)
    )
    table = BinTable(centers, means, counts)
    cfg_kwargs = dict(seed=args.seed)
    if args.max_iters is not None:
        cfg_kwargs["max_iters"] = args.max_iters
    if args.batch is not None:
        cfg_kwargs["batch"] = args.batch
    config = DSRConfig(**cfg_kwargs)
    result = discover(table, TokenLibrary(), config)
    payload = {
        "expression": result.expression,
        "nrmse": result.nrmse,
        "reward": result.reward,
        "tokens": result.tokens,
        "constants": list(result.consts),
        "iterations": result.iterations,
        "evaluations": result.evaluations,
    }
    (out / "discovery.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_run_record(
        out, "discover", dataclasses.asdict(config),
        wall_seconds=time.time() - t0,
        outputs=["discovery.json"],
        nrmse=result.nrmse,
        expression=result.expression,
    )
    print(f"best: {result.expression}  (NRMSE {result.nrmse:.3g})")
    return 0


def cmd_grad_check(args) -> int:
    from . import autodiff as ad
    from .autodiff import Tensor, grad_check
    from .hpe import ScenarioKind, build_model, euler_step

    grid = GridSpec(args.grid, args.grid)
    model = build_model(
        ScenarioKind(args.scenario), grid=grid, system=SystemKind.CH,
        dt=0.01, seed=args.seed,
        afno_overrides=dict(dropout=0.0),
    )
    u0 = initial_condition(SystemKind.CH, args.seed, grid=grid).values

    named = model.named_tensors()

    def loss_fn() -> Tensor:
        u = euler_step(Tensor(u0), model)
        return (u * u).sum() * (1.0 / u0.size)

    report = grad_check(loss_fn, named, seed=args.seed)
    worst = report.max_rel_error
    for name, err in sorted(report.per_tensor.items()):
        print(f"{name:32s} rel err {err:.3e}")
    print(f"worst relative error: {worst:.3e}")
    if worst > 1e-4:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print("gradient check passed")
    return 0


def cmd_render(args) -> int:
    field, _meta = read_field(args.field)
    if not isinstance(field, RealField):
        field = RealField(field.grid, np.abs(field.values))
    render_pgm(args.out, field, lo=args.lo, hi=args.hi)
    print(f"wrote {args.out}")
    return 0


# ----- parser -----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpelab",
        description="Phase-field surrogate training and constitutive-law discovery",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate a reference trajectory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("degrade", help="subsample and add noise")
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dt-obs", type=float, required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-max", type=float, default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="fit a scenario model to observations")
    p.add_argument("--config", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model against dense truth")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-split", type=float, default=9.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid of observation cadences and noise levels")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bin", help="bin a learned channel against the state")
    p.add_argument("--model", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--t-min", type=float, default=1.0)
    p.add_argument("--t-max", type=float, default=9.0)
    p.add_argument("--min-count", type=int, default=10)
    p.set_defaults(func=cmd_bin)

    p = sub.add_parser("discover", help="symbolic regression on a bin table")
    p.add_argument("--bins", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("grad-check", help="finite-difference audit of the tape")
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--scenario", default="white-black")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("render", help="field file to 16-bit grayscale PGM")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lo", type=float, default=None)
    p.add_argument("--hi", type=float, default=None)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, StorageError, FieldError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
