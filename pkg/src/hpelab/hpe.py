"""Two-level hierarchical surrogate with swappable physics knowledge.

The time derivative of the observed state is modeled as

    du/dt = F(u) = combine(extract(u), u)

where ``extract`` produces three constitutive feature channels and
``combine`` assembles them into a scalar rate field. Each level is either a
learned Fourier-attention network or the known closed form, giving four
scenarios:

* ``black-black``  both levels learned,
* ``white-black``  known channels (M, mu_hom, -kappa*lap c), learned combine,
* ``black-white``  learned channels, known flux-divergence combination,
* ``discovery``    two learned channels regularized by a concentration
                   consistency map plus the known gradient-energy channel,
                   known combination.

Channel order is fixed as (mobility-like, potential-like, gradient-energy)
everywhere. The known combination is div(f1 * grad(f2 + f3)) on the
first-order stencils, so a perfectly extracted channel set reproduces the
conserved dynamics up to stencil error. States are clamped to
[1e-6, 1-1e-6] before entering logarithmic known channels (never before a
loss). Prediction advances by forward Euler: u <- u + dt * F(u).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .afno import AFNOConfig, AFNOParams, afno_forward, init_afno_params
from .autodiff import Tensor
from .fields import GridSpec, RealField
from .simulate import CLAMP_EPS, PhysParams, SystemKind, Trajectory, pde_rhs


class ScenarioKind(str, Enum):
    BLACK_BLACK = "black-black"
    WHITE_BLACK = "white-black"
    BLACK_WHITE = "black-white"
    DISCOVERY = "discovery"


@dataclass(frozen=True)
class KernelMapConfig:
    sigma: float = 0.05
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("kernel sigma must be positive")
        if self.epsilon <= 0.0:
            raise ValueError("kernel epsilon must be positive")


# scenario -> (level-1 learned channels or None, level-2 learned or known)
_SCENARIO_L1_CHANNELS = {
    ScenarioKind.BLACK_BLACK: 3,
    ScenarioKind.WHITE_BLACK: None,
    ScenarioKind.BLACK_WHITE: 3,
    ScenarioKind.DISCOVERY: 2,
}
_SCENARIO_L2_LEARNED = {
    ScenarioKind.BLACK_BLACK: True,
    ScenarioKind.WHITE_BLACK: True,
    ScenarioKind.BLACK_WHITE: False,
    ScenarioKind.DISCOVERY: False,
}


@dataclass
class HPEModelParams:
    """Scenario wiring plus whatever tensors that scenario learns."""

    scenario: ScenarioKind
    system: SystemKind
    grid: GridSpec
    dt: float
    phys: PhysParams
    kernel: KernelMapConfig
    level1: AFNOParams | None
    level2: AFNOParams | None
    seed: int = 0  # initialization seed, recorded for provenance

    def __post_init__(self):
        self.scenario = ScenarioKind(self.scenario)
        self.system = SystemKind(self.system)
        if self.dt < 0.0:
            raise ValueError("model dt must be non-negative")
        want_l1 = _SCENARIO_L1_CHANNELS[self.scenario]
        if (want_l1 is None) != (self.level1 is None):
            raise ValueError(f"{self.scenario.value} level-1 wiring mismatch")
        if want_l1 is not None and self.level1.config.out_channels != want_l1:
            raise ValueError(
                f"{self.scenario.value} needs {want_l1} learned channels, "
                f"got {self.level1.config.out_channels}"
            )
        if _SCENARIO_L2_LEARNED[self.scenario] != (self.level2 is not None):
            raise ValueError(f"{self.scenario.value} level-2 wiring mismatch")
        if self.level2 is not None and self.level2.config.out_channels != 1:
            raise ValueError("level-2 network must emit a single rate channel")

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.level1 is not None:
            out += [(f"level1.{n}", t) for n, t in self.level1.named_tensors()]
        if self.level2 is not None:
            out += [(f"level2.{n}", t) for n, t in self.level2.named_tensors()]
        return out

    def param_count(self) -> int:
        return sum(t.data.size * (2 if t.is_complex else 1) for _, t in self.named_tensors())


def build_model(
    scenario: ScenarioKind,
    grid: GridSpec = GridSpec(64, 64),
    system: SystemKind = SystemKind.CH,
    dt: float = 0.01,
    phys: PhysParams = PhysParams(),
    kernel: KernelMapConfig = KernelMapConfig(),
    seed: int = 0,
    afno_overrides: dict | None = None,
) -> HPEModelParams:
    """Assemble the scenario's networks with the reference architecture."""
    scenario = ScenarioKind(scenario)
    overrides = afno_overrides or {}
    l1_channels = _SCENARIO_L1_CHANNELS[scenario]
    level1 = None
    if l1_channels is not None:
        cfg1 = AFNOConfig(in_channels=1, out_channels=l1_channels, **overrides)
        level1 = init_afno_params(cfg1, grid, seed=seed)
    level2 = None
    if _SCENARIO_L2_LEARNED[scenario]:
        cfg2 = AFNOConfig(in_channels=4, out_channels=1, **overrides)
        level2 = init_afno_params(cfg2, grid, seed=seed + 1)
    return HPEModelParams(
        scenario=scenario, system=system, grid=grid, dt=dt, phys=phys,
        kernel=kernel, level1=level1, level2=level2, seed=seed,
    )


# ----- differentiable stencils (tensor twins of the field-core ops) -----


def t_fd_grad(u: Tensor, grid: GridSpec) -> tuple[Tensor, Tensor]:
    gx = (ad.periodic_shift(u, -1, 0) - u) * (1.0 / grid.dx)
    gy = (ad.periodic_shift(u, -1, 1) - u) * (1.0 / grid.dy)
    return gx, gy


def t_fd_div(fx: Tensor, fy: Tensor, grid: GridSpec) -> Tensor:
    dxp = (fx - ad.periodic_shift(fx, 1, 0)) * (1.0 / grid.dx)
    dyp = (fy - ad.periodic_shift(fy, 1, 1)) * (1.0 / grid.dy)
    return dxp + dyp


def t_fd_laplacian(u: Tensor, grid: GridSpec) -> Tensor:
    return t_fd_div(*t_fd_grad(u, grid), grid)


# ----- known physics pieces -----


def t_known_term_channels(u: Tensor, phys: PhysParams, grid: GridSpec) -> tuple[Tensor, Tensor, Tensor]:
    """(M(c), mu_hom(c), -kappa*lap c) with the composition clamp applied
    before the logarithmic terms."""
    cc = ad.clip(u, CLAMP_EPS, 1.0 - CLAMP_EPS)
    m = cc * (1.0 - cc)
    mu = ad.log(cc) - ad.log(1.0 - cc) + phys.chi * (1.0 - 2.0 * cc)
    grad_energy = -phys.kappa * t_fd_laplacian(u, grid)
    return m, mu, grad_energy


def known_term_channels(c: RealField, phys: PhysParams = PhysParams()) -> tuple[RealField, RealField, RealField]:
    f1, f2, f3 = t_known_term_channels(Tensor(c.values), phys, c.grid)
    return (
        RealField(c.grid, f1.data),
        RealField(c.grid, f2.data),
        RealField(c.grid, f3.data),
    )


def t_known_combination(f1: Tensor, f2: Tensor, f3: Tensor, grid: GridSpec) -> Tensor:
    """div(f1 * grad(f2 + f3)) on the first-order stencils."""
    gx, gy = t_fd_grad(f2 + f3, grid)
    return t_fd_div(f1 * gx, f1 * gy, grid)


def known_combination(f1: RealField, f2: RealField, f3: RealField) -> RealField:
    if not (f1.grid == f2.grid == f3.grid):
        raise ValueError("combination channels live on different grids")
    out = t_known_combination(
        Tensor(f1.values), Tensor(f2.values), Tensor(f3.values), f1.grid
    )
    return RealField(f1.grid, out.data)


# ----- concentration consistency map -----


def kernel_weights(c: np.ndarray, cfg: KernelMapConfig) -> np.ndarray:
    """Exact O(N^2) row-normalized Gaussian similarity in concentration.

    w[i, j] = k(c_i, c_j) / sum_j (k(c_i, c_j) + eps),
    k(a, b) = exp(-(a - b)^2 / (2 sigma^2)).
    """
    ci = np.asarray(c, dtype=np.float64).reshape(-1)
    n = ci.size
    diff = ci[:, None] - ci[None, :]
    k = np.exp(-(diff**2) / (2.0 * cfg.sigma**2))
    denom = k.sum(axis=1) + n * cfg.epsilon
    return k / denom[:, None]


def kernel_consistency_map(
    raw: RealField, c: RealField, cfg: KernelMapConfig = KernelMapConfig()
) -> RealField:
    """Average each cell's raw value over concentration-similar cells."""
    if raw.grid != c.grid:
        raise ValueError("raw channel and state live on different grids")
    w = kernel_weights(c.values, cfg)
    out = (w @ raw.values.reshape(-1)).reshape(raw.grid.shape)
    return RealField(raw.grid, out)


# ----- scenario forward -----


def _as_state_tensor(u, grid: GridSpec) -> Tensor:
    t = u if isinstance(u, Tensor) else Tensor(u.values)
    if t.shape != grid.shape:
        raise ValueError(f"state shape {t.shape} does not match grid {grid.shape}")
    return t


def f_hat(u, model, train: bool = False, dropout_seed: int = 0) -> Tensor:
    """Model time derivative of one state (tensor in, tensor out)."""
    if isinstance(model, SpectralOracleModel):
        return model.time_derivative(u)
    u = _as_state_tensor(u, model.grid)
    scenario = model.scenario
    if scenario is ScenarioKind.WHITE_BLACK:
        f1, f2, f3 = t_known_term_channels(u, model.phys, model.grid)
    elif scenario is ScenarioKind.DISCOVERY:
        feats = afno_forward(
            ad.stack([u]), model.level1, train=train, dropout_seed=dropout_seed
        )
        w = kernel_weights(u.data, model.kernel)  # built outside the tape
        f1 = ad.weighted_average(ad.take_channel(feats, 0), w)
        f2 = ad.weighted_average(ad.take_channel(feats, 1), w)
        f3 = -model.phys.kappa * t_fd_laplacian(u, model.grid)
    else:
        feats = afno_forward(
            ad.stack([u]), model.level1, train=train, dropout_seed=dropout_seed
        )
        f1 = ad.take_channel(feats, 0)
        f2 = ad.take_channel(feats, 1)
        f3 = ad.take_channel(feats, 2)

    if model.level2 is not None:
        stacked = ad.stack([f1, f2, f3, u])
        rate = afno_forward(
            stacked, model.level2, train=train, dropout_seed=dropout_seed + 7919
        )
        return ad.take_channel(rate, 0)
    return t_known_combination(f1, f2, f3, model.grid)


def euler_step(u, model, train: bool = False, dropout_seed: int = 0) -> Tensor:
    grid = model.grid
    u = _as_state_tensor(u, grid)
    return u + model.dt * f_hat(u, model, train=train, dropout_seed=dropout_seed)


def rollout(u0: RealField, model, n_steps: int) -> Trajectory:
    """Deterministic evaluation-mode forward-Euler rollout from a clean state."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    state = Tensor(u0.values)
    times = [0.0]
    snaps = [RealField(u0.grid, state.data)]
    for k in range(1, n_steps + 1):
        state = euler_step(state, model)
        if not np.all(np.isfinite(state.data)):
            from .simulate import NumericError

            raise NumericError(f"model rollout diverged at step {k}", step=k)
        times.append(k * model.dt)
        snaps.append(RealField(u0.grid, state.data))
    return Trajectory(model.system, u0.grid, np.asarray(times), snaps, model.phys)


class SpectralOracleModel:
    """Drop-in model whose rate is the true spectral right-hand side.

    Nothing learnable; useful as a reference for rollout/training plumbing.
    """

    def __init__(
        self,
        system: SystemKind = SystemKind.CH,
        grid: GridSpec = GridSpec(64, 64),
        dt: float = 0.01,
        phys: PhysParams = PhysParams(),
    ):
        self.system = SystemKind(system)
        self.grid = grid
        self.dt = dt
        self.phys = phys

    def time_derivative(self, u) -> Tensor:
        t = u if isinstance(u, Tensor) else Tensor(u.values)
        rhs = pde_rhs(RealField(self.grid, t.data), self.system, self.phys)
        return Tensor(rhs.values)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return []
