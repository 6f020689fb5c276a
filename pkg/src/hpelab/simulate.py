"""Ground-truth pseudo-spectral solvers and dataset degradation.

Four prototype systems on a periodic grid, all advanced with a first-order
semi-implicit (IMEX) step: the stiff constant-coefficient linear operator is
inverted in Fourier space, everything else is explicit. For the conserved
system the explicit remainder has its DC mode pinned to zero, so the cell
mean is untouched by construction.

Systems and their implicit operators:

* ``ch``    conserved composition dynamics, implicit -S*kappa*lap^2, S = 0.25
* ``ac``    non-conserved kinetics,        implicit  S*kappa*lap,   S = 0.25
* ``dkpz``  deterministic growth,          implicit  nu*lap
* ``cgl``   complex oscillatory medium,    implicit  (1+i*alpha)*lap

Degradation utilities thin a dense trajectory to sparse observation times and
add amplitude-scaled Gaussian noise: noisy = truth + R*sigma*(max-min)/2 with
R iid standard normal and the range taken over the entire trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .fields import (
    ComplexField,
    Field,
    FieldError,
    GridSpec,
    RealField,
)

CLAMP_EPS = 1e-6  # composition guard before logarithmic terms
BLOWUP_LIMIT = 1e6


class NumericError(RuntimeError):
    """Solver blow-up or non-finite state; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SystemKind(str, Enum):
    CH = "ch"
    AC = "ac"
    DKPZ = "dkpz"
    CGL = "cgl"


@dataclass(frozen=True)
class PhysParams:
    """Coefficients of the four systems (defaults are the reference set)."""

    chi: float = 3.0        # interaction strength in the homogeneous potential
    kappa: float = 1.0      # gradient-energy coefficient
    nu: float = 0.1         # growth-model surface tension
    lam: float = -0.5       # growth-model tilt nonlinearity
    alpha: float = -0.5     # oscillatory-medium linear dispersion
    beta: float = 1.07      # oscillatory-medium nonlinear dispersion

    def __post_init__(self):
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")
        if self.nu <= 0.0:
            raise ValueError("nu must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Amplitude-scaled Gaussian observation noise."""

    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ValueError("sigma must be non-negative")


@dataclass
class Trajectory:
    """Uniformly spaced snapshots of one system."""

    system: SystemKind
    grid: GridSpec
    times: np.ndarray
    snapshots: list[Field]
    params: PhysParams
    seed: int | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.snapshots) != self.times.size:
            raise ValueError("times and snapshots disagree in length")
        if self.times.size >= 2:
            dt = np.diff(self.times)
            if not np.allclose(dt, dt[0], rtol=0.0, atol=1e-9):
                raise ValueError("trajectory times must be uniformly spaced")

    @property
    def spacing(self) -> float:
        if self.times.size < 2:
            raise ValueError("trajectory has fewer than two snapshots")
        return float(self.times[1] - self.times[0])

    def values(self) -> np.ndarray:
        """Stacked snapshot values, shape (n_times, nx, ny)."""
        return np.stack([s.values for s in self.snapshots])


# ----- constitutive relations -----


def _mu_hom(c: np.ndarray, chi: float) -> np.ndarray:
    return np.log(c / (1.0 - c)) + chi * (1.0 - 2.0 * c)


def _g_hom(c: np.ndarray, chi: float) -> np.ndarray:
    return c * np.log(c) + (1.0 - c) * np.log(1.0 - c) + chi * c * (1.0 - c)


CONSTITUTIVE_KINDS = ("mu_hom", "D", "M", "R0", "g_hom")


def constitutive(c: float, kind: str, params: PhysParams = PhysParams()) -> float:
    """Point evaluation of one constitutive relation.

    kinds: ``mu_hom`` homogeneous chemical potential, ``D`` diffusivity 1-c,
    ``M`` mobility c*(1-c), ``R0`` kinetic prefactor c*(1-c), ``g_hom``
    homogeneous free-energy density. The logarithmic kinds require c in (0,1).
    """
    if kind not in CONSTITUTIVE_KINDS:
        raise ValueError(f"unknown constitutive kind {kind!r}")
    c = float(c)
    if kind in ("mu_hom", "g_hom") and not (0.0 < c < 1.0):
        raise ValueError(f"{kind} requires c in (0,1), got {c}")
    if kind == "mu_hom":
        return float(_mu_hom(np.float64(c), params.chi))
    if kind == "g_hom":
        return float(_g_hom(np.float64(c), params.chi))
    if kind == "D":
        return 1.0 - c
    # M and R0 share the same polynomial form
    return c * (1.0 - c)


def clamp_composition(c: np.ndarray) -> np.ndarray:
    return np.clip(c, CLAMP_EPS, 1.0 - CLAMP_EPS)


# ----- spectral workspace (cached per grid) -----


@lru_cache(maxsize=None)
def _spectral(grid: GridSpec):
    kx = 2.0 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
    ky = 2.0 * np.pi * np.fft.fftfreq(grid.ny, d=grid.dy)
    ikx = 1j * kx
    iky = 1j * ky
    # first derivatives drop the Nyquist line (no real representative)
    ikx[grid.nx // 2] = 0.0
    iky[grid.ny // 2] = 0.0
    k2 = kx[:, None] ** 2 + ky[None, :] ** 2
    return ikx[:, None], iky[None, :], k2, k2**2


def _lap(values: np.ndarray, k2: np.ndarray) -> np.ndarray:
    out = np.fft.ifft2(-k2 * np.fft.fft2(values))
    return out.real if np.isrealobj(values) else out


def _grad(values: np.ndarray, ikx, iky) -> tuple[np.ndarray, np.ndarray]:
    vh = np.fft.fft2(values)
    return np.fft.ifft2(ikx * vh).real, np.fft.ifft2(iky * vh).real


# ----- right-hand sides (spectral spatial operators) -----


def _rhs_ch(c: np.ndarray, p: PhysParams, grid: GridSpec) -> np.ndarray:
    ikx, iky, k2, _ = _spectral(grid)
    cc = clamp_composition(c)
    mu = _mu_hom(cc, p.chi) - p.kappa * _lap(c, k2)
    mob = cc * (1.0 - cc)
    gx, gy = _grad(mu, ikx, iky)
    flux = np.fft.ifft2(ikx * np.fft.fft2(mob * gx) + iky * np.fft.fft2(mob * gy)).real
    return flux


def _rhs_ac(c: np.ndarray, p: PhysParams, grid: GridSpec) -> np.ndarray:
    _, _, k2, _ = _spectral(grid)
    cc = clamp_composition(c)
    mu = _mu_hom(cc, p.chi) - p.kappa * _lap(c, k2)
    return -cc * (1.0 - cc) * mu


def _rhs_dkpz(h: np.ndarray, p: PhysParams, grid: GridSpec) -> np.ndarray:
    ikx, iky, k2, _ = _spectral(grid)
    gx, gy = _grad(h, ikx, iky)
    return p.nu * _lap(h, k2) + 0.5 * p.lam * (gx**2 + gy**2)


def _rhs_cgl(u: np.ndarray, p: PhysParams, grid: GridSpec) -> np.ndarray:
    _, _, k2, _ = _spectral(grid)
    return (1.0 + 1j * p.alpha) * _lap(u, k2) + u - (1.0 + 1j * p.beta) * np.abs(u) ** 2 * u


_RHS = {
    SystemKind.CH: _rhs_ch,
    SystemKind.AC: _rhs_ac,
    SystemKind.DKPZ: _rhs_dkpz,
    SystemKind.CGL: _rhs_cgl,
}


def pde_rhs(state: Field, system: SystemKind, params: PhysParams = PhysParams()) -> Field:
    """Instantaneous time derivative of one state."""
    system = SystemKind(system)
    if system is SystemKind.CGL:
        if not isinstance(state, ComplexField):
            raise FieldError("cgl state must be a complex field")
        return ComplexField(state.grid, _rhs_cgl(state.values, params, state.grid))
    if not isinstance(state, RealField):
        raise FieldError(f"{system.value} state must be a real field")
    return RealField(state.grid, _RHS[system](state.values, params, state.grid))


# ----- time stepping -----

SPLIT_CH = 0.25   # constant-mobility splitting, max of c*(1-c)
SPLIT_AC = 0.25   # matches the largest kinetic prefactor


def _stepper(system: SystemKind, grid: GridSpec, p: PhysParams, dt: float):
    """Returns step(state)->state advancing one IMEX step of length dt."""
    ikx, iky, k2, k4 = _spectral(grid)

    if system is SystemKind.CH:
        denom = 1.0 + dt * SPLIT_CH * p.kappa * k4

        def step(c):
            n = _rhs_ch(c, p, grid) + SPLIT_CH * p.kappa * np.fft.ifft2(
                k4 * np.fft.fft2(c)
            ).real
            n_hat = np.fft.fft2(n)
            n_hat[0, 0] = 0.0  # conserved dynamics: DC mode untouched
            return np.fft.ifft2((np.fft.fft2(c) + dt * n_hat) / denom).real

    elif system is SystemKind.AC:
        denom = 1.0 + dt * SPLIT_AC * p.kappa * k2

        def step(c):
            n = _rhs_ac(c, p, grid) - SPLIT_AC * p.kappa * _lap(c, k2)
            return np.fft.ifft2((np.fft.fft2(c) + dt * np.fft.fft2(n)) / denom).real

    elif system is SystemKind.DKPZ:
        denom = 1.0 + dt * p.nu * k2

        def step(h):
            gx, gy = _grad(h, ikx, iky)
            n = 0.5 * p.lam * (gx**2 + gy**2)
            return np.fft.ifft2((np.fft.fft2(h) + dt * np.fft.fft2(n)) / denom).real

    else:  # CGL
        denom = 1.0 + dt * (1.0 + 1j * p.alpha) * k2

        def step(u):
            n = u - (1.0 + 1j * p.beta) * np.abs(u) ** 2 * u
            return np.fft.ifft2((np.fft.fft2(u) + dt * np.fft.fft2(n)) / denom)

    return step


def integrate(
    ic: Field,
    system: SystemKind,
    params: PhysParams = PhysParams(),
    t_end: float = 20.0,
    dt: float = 0.002,
    save_every: int = 5,
    seed: int | None = None,
) -> Trajectory:
    """Advance the initial condition to t_end, saving every ``save_every`` steps."""
    system = SystemKind(system)
    if dt <= 0.0 or t_end <= 0.0:
        raise ValueError("dt and t_end must be positive")
    if save_every < 1:
        raise ValueError("save_every must be >= 1")
    n_steps = round(t_end / dt)
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end={t_end} is not an integer number of dt={dt} steps")
    if n_steps % save_every != 0:
        raise ValueError("save_every must divide the total step count")

    is_cgl = system is SystemKind.CGL
    if is_cgl and not isinstance(ic, ComplexField):
        raise FieldError("cgl initial condition must be complex")
    if not is_cgl and not isinstance(ic, RealField):
        raise FieldError(f"{system.value} initial condition must be real")

    grid = ic.grid
    step = _stepper(system, grid, params, dt)
    wrap = ComplexField if is_cgl else RealField

    def store(values: np.ndarray) -> Field:
        if system is SystemKind.DKPZ:
            values = values - values.mean()  # gauge: heights stored mean-free
        return wrap(grid, values)

    state = ic.values.copy()
    times = [0.0]
    snaps: list[Field] = [store(state)]
    for k in range(1, n_steps + 1):
        state = step(state)
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > BLOWUP_LIMIT:
            raise NumericError(f"{system.value} solver blew up at step {k}", step=k)
        if k % save_every == 0:
            times.append(k * dt)
            snaps.append(store(state))
    return Trajectory(system, grid, np.asarray(times), snaps, params, seed=seed)


# ----- initial conditions -----


def initial_condition(
    system: SystemKind, seed: int, grid: GridSpec = GridSpec(64, 64)
) -> Field:
    """Seeded random initial state in each system's reference ensemble."""
    system = SystemKind(system)
    rng = np.random.default_rng(seed)
    if system in (SystemKind.CH, SystemKind.AC):
        return RealField(grid, 0.5 + rng.uniform(-0.05, 0.05, size=grid.shape))
    if system is SystemKind.DKPZ:
        vals = rng.uniform(-0.1, 0.1, size=grid.shape)
        return RealField(grid, vals - vals.mean())
    # uniform over the complex disc of radius 0.1
    r = 0.1 * np.sqrt(rng.uniform(0.0, 1.0, size=grid.shape))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=grid.shape)
    return ComplexField(grid, r * np.exp(1j * theta))


# ----- degradation: sparse sampling, modulus, noise -----


def sample_sparse(traj: Trajectory, dt_obs: float) -> Trajectory:
    """Keep snapshots at multiples of dt_obs (must be a multiple of the spacing)."""
    spacing = traj.spacing
    ratio = dt_obs / spacing
    stride = round(ratio)
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ValueError(f"dt_obs={dt_obs} is not an integer multiple of spacing={spacing}")
    idx = range(0, traj.times.size, stride)
    return Trajectory(
        traj.system,
        traj.grid,
        traj.times[list(idx)],
        [traj.snapshots[i] for i in idx],
        traj.params,
        seed=traj.seed,
        noise_sigma=traj.noise_sigma,
    )


def to_modulus(traj: Trajectory) -> Trajectory:
    """Replace complex snapshots by their modulus (observable amplitude)."""
    snaps = [
        RealField(s.grid, np.abs(s.values)) if isinstance(s, ComplexField) else s
        for s in traj.snapshots
    ]
    return Trajectory(
        traj.system, traj.grid, traj.times, snaps, traj.params,
        seed=traj.seed, noise_sigma=traj.noise_sigma,
    )


def add_noise(traj: Trajectory, spec: NoiseSpec) -> Trajectory:
    """noisy = truth + R*sigma*(max-min)/2, range over the whole trajectory."""
    for s in traj.snapshots:
        if isinstance(s, ComplexField):
            raise ValueError("noise applies to real observations; take the modulus first")
    if spec.sigma == 0.0:
        return Trajectory(
            traj.system, traj.grid, traj.times, list(traj.snapshots), traj.params,
            seed=traj.seed, noise_sigma=0.0,
        )
    stacked = traj.values()
    half_range = 0.5 * (stacked.max() - stacked.min())
    rng = np.random.default_rng(spec.seed)
    noisy = [
        RealField(traj.grid, s.values + rng.standard_normal(traj.grid.shape) * spec.sigma * half_range)
        for s in traj.snapshots
    ]
    return Trajectory(
        traj.system, traj.grid, traj.times, noisy, traj.params,
        seed=traj.seed, noise_sigma=spec.sigma,
    )


# ----- diagnostics -----


def free_energy(f: RealField, params: PhysParams = PhysParams()) -> float:
    """Discrete functional sum[g_hom(c) + kappa/2 |grad c|^2] dx dy (spectral grad)."""
    ikx, iky, _, _ = _spectral(f.grid)
    cc = clamp_composition(f.values)
    gx, gy = _grad(f.values, ikx, iky)
    density = _g_hom(cc, params.chi) + 0.5 * params.kappa * (gx**2 + gy**2)
    return float(np.sum(density) * f.grid.cell_area)


def total_mass(f: RealField) -> float:
    return float(np.sum(f.values) * f.grid.cell_area)
