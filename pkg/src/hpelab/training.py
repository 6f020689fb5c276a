"""Truncated-BPTT training on sparse noisy observations, plus evaluation.

One epoch visits every teacher-forced segment once in a seeded shuffled
order. A segment starts from an observed (noisy) snapshot, rolls
``bptt_window * (dt_obs / dt)`` Euler steps on the tape, and applies the MSE
against the next ``bptt_window`` observations; each segment takes one Adam
step. The loss only ever sees observations; ground truth enters nowhere.

Evaluation rolls the trained model from the clean initial condition across
the full horizon and reports the per-snapshot RMSE curve split into an
interpolation average (t <= t_split) and an extrapolation average
(t > t_split).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Tape, Tensor
from .fields import RealField
from .simulate import (
    NoiseSpec,
    PhysParams,
    SystemKind,
    Trajectory,
    add_noise,
    initial_condition,
    integrate,
    sample_sparse,
    to_modulus,
)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_size: int = 500     # epochs per learning-rate halving
    gamma: float = 0.5
    epochs: int = 3000
    patience: int = 500      # epochs without improvement before stopping
    bptt_window: int = 1     # observation intervals per segment
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0.0 or self.epochs < 1 or self.bptt_window < 1:
            raise ValueError("bad training configuration")


def effective_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.gamma ** (epoch // config.step_size)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_update(
    named_params: list[tuple[str, Tensor]],
    state: AdamState,
    config: TrainConfig,
    epoch: int = 0,
) -> bool:
    """One Adam step from the gradients currently held by the parameters.

    Any non-finite gradient skips the whole step (counted, not fatal).
    Returns True when the step was applied.
    """
    grads = {}
    for name, t in named_params:
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
        grads[name] = g
    state.step += 1
    b1, b2 = config.betas
    lr = effective_lr(config, epoch)
    t_ = state.step
    for name, param in named_params:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        # complex params: curvature from |g|^2 keeps the step real-scaled
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * np.conj(g)).real
        m_hat = state.m[name] / (1.0 - b1**t_)
        v_hat = state.v[name] / (1.0 - b2**t_)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return True


def mse_loss(preds: list[Tensor], targets: list[np.ndarray]) -> Tensor:
    """Mean squared error over all predicted snapshots and cells."""
    if len(preds) != len(targets) or not preds:
        raise ValueError("prediction/target lengths disagree")
    total = None
    count = 0
    for p, t in zip(preds, targets):
        d = p - Tensor(np.asarray(t))
        s = (d * d).sum()
        total = s if total is None else total + s
        count += p.data.size
    return total * (1.0 / count)


def _dropout_seed(seed: int, epoch: int, segment: int, step: int) -> int:
    mix = np.uint64(seed) * np.uint64(1000003) + np.uint64(epoch)
    mix = mix * np.uint64(1000003) + np.uint64(segment)
    mix = mix * np.uint64(1000003) + np.uint64(step)
    return int(mix % np.uint64(2**63 - 1))


def train(
    model,
    obs_traj: Trajectory,
    ic: RealField | None = None,
    config: TrainConfig = TrainConfig(),
) -> tuple[object, np.ndarray]:
    """Fit the model's learnable tensors to the observation trajectory.

    ``ic`` optionally replaces the first observation as the start of the
    first segment (it defaults to obs[0]). Returns the model and the epoch
    loss history. Bitwise reproducible for fixed (seed, config, data).
    """
    from .hpe import euler_step  # local import to avoid a cycle

    steps_per_obs = round(obs_traj.spacing / model.dt)
    if steps_per_obs < 1 or abs(steps_per_obs * model.dt - obs_traj.spacing) > 1e-9:
        raise ValueError("observation spacing must be an integer multiple of model dt")
    window = config.bptt_window
    n_obs = len(obs_traj.snapshots)
    if n_obs < window + 1:
        raise ValueError("not enough observations for one segment")
    starts = [
        ic.values if (k == 0 and ic is not None) else obs_traj.snapshots[k].values
        for k in range(n_obs - window)
    ]
    targets = [
        [obs_traj.snapshots[k + w].values for w in range(1, window + 1)]
        for k in range(n_obs - window)
    ]

    named = model.named_tensors()
    state = AdamState()
    history: list[float] = []
    best = np.inf
    stale = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(starts))
        # indexed by segment so the epoch average ignores visit order
        epoch_losses = np.empty(len(starts))
        for seg in order:
            seg = int(seg)
            for _, t in named:
                t.zero_grad()
            with Tape() as tape:
                u = Tensor(starts[seg])
                preds = []
                for step_i in range(window * steps_per_obs):
                    u = euler_step(
                        u, model, train=True,
                        dropout_seed=_dropout_seed(config.seed, epoch, seg, step_i),
                    )
                    if (step_i + 1) % steps_per_obs == 0:
                        preds.append(u)
                loss = mse_loss(preds, targets[seg])
            loss_val = float(loss.data)
            if named and np.isfinite(loss_val):
                tape.backward(loss)
                adam_update(named, state, config, epoch)
            elif not np.isfinite(loss_val):
                state.skipped += 1
            epoch_losses[seg] = loss_val
        epoch_loss = float(np.mean(epoch_losses))
        history.append(epoch_loss)
        if epoch_loss < best:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return model, np.asarray(history)


# ----- evaluation -----


def rmse(pred: np.ndarray | RealField, truth: np.ndarray | RealField) -> float:
    """sqrt(sum((pred - truth)^2) / N) over all cells."""
    a = pred.values if isinstance(pred, RealField) else np.asarray(pred)
    b = truth.values if isinstance(truth, RealField) else np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError("rmse operands differ in shape")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class EvalReport:
    times: np.ndarray
    rmse_per_time: np.ndarray
    t_split: float

    @property
    def interp_avg(self) -> float:
        return float(np.mean(self.rmse_per_time[self.times <= self.t_split]))

    @property
    def extrap_avg(self) -> float:
        mask = self.times > self.t_split
        if not np.any(mask):
            return float("nan")
        return float(np.mean(self.rmse_per_time[mask]))


def evaluate(model, ic: RealField, truth: Trajectory, t_split: float = 9.0) -> EvalReport:
    """Full-horizon rollout from the clean initial state vs dense truth."""
    from .hpe import rollout

    if abs(truth.spacing - model.dt) > 1e-9:
        raise ValueError("truth spacing must equal the model step for evaluation")
    pred = rollout(ic, model, n_steps=len(truth.snapshots) - 1)
    errs = np.array(
        [rmse(p, t) for p, t in zip(pred.snapshots, truth.snapshots)]
    )
    return EvalReport(times=truth.times.copy(), rmse_per_time=errs, t_split=t_split)


# ----- robustness sweep -----


@dataclass
class SweepCell:
    dt_obs: float
    sigma: float
    interp_avg: float
    extrap_avg: float
    n_runs: int


def truncate_time(traj: Trajectory, t_max: float) -> Trajectory:
    keep = traj.times <= t_max + 1e-12
    return Trajectory(
        traj.system, traj.grid, traj.times[keep],
        [s for s, k in zip(traj.snapshots, keep) if k], traj.params,
        seed=traj.seed, noise_sigma=traj.noise_sigma,
    )


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("HPE_THREADS", "1")))
    except ValueError:
        return 1


def robustness_sweep(
    scenario,
    dt_obs_list: list[float],
    sigma_list: list[float],
    seeds: list[int],
    system: SystemKind = SystemKind.CH,
    grid=None,
    phys: PhysParams = PhysParams(),
    t_end: float = 20.0,
    t_obs_end: float = 9.0,
    dt_solver: float = 0.002,
    save_every: int = 5,
    model_dt: float = 0.01,
    train_config: TrainConfig = TrainConfig(),
    afno_overrides: dict | None = None,
    train_fn=None,
    evaluate_fn=None,
) -> list[SweepCell]:
    """Grid of (dt_obs, sigma) cells; one training run per cell per seed.

    Each seed draws its own initial condition and truth trajectory; cell
    averages pool the per-seed interp/extrap RMSE. ``train_fn``/
    ``evaluate_fn`` are injection points for tests. Worker parallelism is
    capped by the HPE_THREADS environment variable (default 1, sequential).
    """
    from .fields import GridSpec
    from .hpe import build_model

    grid = grid or GridSpec(64, 64)
    train_fn = train_fn or train
    evaluate_fn = evaluate_fn or evaluate

    per_seed = {}
    for seed in seeds:
        ic = initial_condition(system, seed, grid=grid)
        truth = integrate(
            ic, system, params=phys, t_end=t_end, dt=dt_solver,
            save_every=save_every, seed=seed,
        )
        if system is SystemKind.CGL:
            truth = to_modulus(truth)
            ic = truth.snapshots[0]
        per_seed[seed] = (ic, truth)

    def run_one(dt_obs: float, sigma: float, seed: int) -> tuple[float, float]:
        ic, truth = per_seed[seed]
        obs = sample_sparse(truncate_time(truth, t_obs_end), dt_obs)
        obs = add_noise(obs, NoiseSpec(sigma=sigma, seed=seed + 99991))
        model = build_model(
            scenario, grid=grid, system=system, dt=model_dt, phys=phys,
            seed=seed, afno_overrides=afno_overrides,
        )
        model, _ = train_fn(model, obs, ic=None, config=train_config)
        report = evaluate_fn(model, ic, truth, t_split=t_obs_end)
        return report.interp_avg, report.extrap_avg

    threads = default_threads()
    cells = []
    for dt_obs in dt_obs_list:
        for sigma in sigma_list:
            if threads > 1 and len(seeds) > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(max_workers=threads) as pool:
                    results = list(
                        pool.map(lambda s: run_one(dt_obs, sigma, s), seeds)
                    )
            else:
                results = [run_one(dt_obs, sigma, s) for s in seeds]
            interp = [r[0] for r in results]
            extrap = [r[1] for r in results]
            cells.append(
                SweepCell(
                    dt_obs=dt_obs, sigma=sigma,
                    interp_avg=float(np.mean(interp)),
                    extrap_avg=float(np.mean(extrap)),
                    n_runs=len(seeds),
                )
            )
    return cells
