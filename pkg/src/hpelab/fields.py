"""Periodic 2-D grids, field values, DFTs, and difference stencils.

Everything downstream (solvers, surrogate models, discovery) shares these
value types. Conventions, fixed once here:

* grids are uniform and periodic in both directions; dx = dy = 1 by default,
* the forward DFT is unnormalized, the inverse carries 1/(nx*ny),
* mode (0, 0) is the DC component; frequencies wrap in signed order,
* odd-order spectral derivatives zero the Nyquist line of the odd axis,
* finite-difference gradient uses forward differences, divergence uses
  backward differences, so ``fd_div`` is the negative adjoint of ``fd_grad``
  and their composition is the familiar 5-point Laplacian.

Fields are immutable values: the backing arrays are marked read-only so they
are safe to share across threads and to alias inside trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class FieldError(ValueError):
    """Malformed field data or incompatible grids."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid: nx x ny cells, spacing (dx, dy)."""

    nx: int
    ny: int
    dx: float = 1.0
    dy: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise FieldError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.nx % 2 != 0 or self.ny % 2 != 0:
            raise FieldError(f"grid sides must be even, got {self.nx}x{self.ny}")
        if not (self.dx > 0.0 and self.dy > 0.0):
            raise FieldError(f"grid spacing must be positive, got dx={self.dx} dy={self.dy}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy


def _freeze(values: np.ndarray, grid: GridSpec, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.shape != grid.shape:
        raise FieldError(f"values shape {arr.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise FieldError("field values must be finite")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RealField:
    """Real scalar field sampled at cell centers, row-major (x index first)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, self.grid, np.float64))


@dataclass(frozen=True)
class ComplexField:
    """Complex scalar field sampled at cell centers."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, self.grid, np.complex128))


@dataclass(frozen=True)
class SpectralField:
    """DFT coefficients of a field, unnormalized forward convention.

    ``modes[k1, k2]`` multiplies exp(+2*pi*i*(k1*x/nx + k2*y/ny)) / (nx*ny)
    in the inverse transform; (0, 0) is the DC mode and frequencies wrap in
    the usual signed order.
    """

    grid: GridSpec
    modes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.modes, dtype=np.complex128)
        if arr.shape != self.grid.shape:
            raise FieldError(f"modes shape {arr.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise FieldError("spectral modes must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "modes", arr)


Field = RealField | ComplexField


@lru_cache(maxsize=None)
def wavenumbers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Angular wavenumbers (rad per length) along each axis, signed wrap order."""
    kx = 2.0 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
    ky = 2.0 * np.pi * np.fft.fftfreq(grid.ny, d=grid.dy)
    kx.flags.writeable = False
    ky.flags.writeable = False
    return kx, ky


def dft2(f: Field) -> SpectralField:
    """Unnormalized forward 2-D DFT of a field."""
    if not np.all(np.isfinite(f.values)):
        raise FieldError("dft2 input must be finite")
    return SpectralField(f.grid, np.fft.fft2(f.values))


def idft2(s: SpectralField) -> ComplexField:
    """Inverse 2-D DFT with the 1/(nx*ny) normalization."""
    return ComplexField(s.grid, np.fft.ifft2(s.modes))


def idft2_real(s: SpectralField, tol: float = 1e-9) -> RealField:
    """Inverse DFT of Hermitian-symmetric modes; rejects non-real results."""
    vals = np.fft.ifft2(s.modes)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.max(np.abs(vals.imag)) > tol * scale:
        raise FieldError("inverse transform is not real within tolerance")
    return RealField(s.grid, vals.real)


def _derivative_multiplier(grid: GridSpec, order_x: int, order_y: int) -> np.ndarray:
    kx, ky = wavenumbers(grid)
    mx = (1j * kx) ** order_x
    my = (1j * ky) ** order_y
    # Odd-order derivatives have no real representative at the Nyquist
    # frequency; that line is zeroed so real fields map to real fields.
    if order_x % 2 == 1:
        mx = mx.copy()
        mx[grid.nx // 2] = 0.0
    if order_y % 2 == 1:
        my = my.copy()
        my[grid.ny // 2] = 0.0
    return mx[:, None] * my[None, :]


def spectral_derivative(s: SpectralField, order_x: int, order_y: int) -> SpectralField:
    """Multiply modes by (i*kx)^order_x * (i*ky)^order_y."""
    if order_x < 0 or order_y < 0:
        raise FieldError("derivative orders must be non-negative")
    return SpectralField(s.grid, s.modes * _derivative_multiplier(s.grid, order_x, order_y))


# ----- first-order difference stencils (periodic wrap) -----


def fd_grad(f: RealField) -> tuple[RealField, RealField]:
    """Forward-difference gradient components along x and y."""
    v = f.values
    gx = (np.roll(v, -1, axis=0) - v) / f.grid.dx
    gy = (np.roll(v, -1, axis=1) - v) / f.grid.dy
    return RealField(f.grid, gx), RealField(f.grid, gy)


def fd_div(fx: RealField, fy: RealField) -> RealField:
    """Backward-difference divergence; negative adjoint of ``fd_grad``."""
    if fx.grid != fy.grid:
        raise FieldError("divergence components live on different grids")
    vx, vy = fx.values, fy.values
    dxp = (vx - np.roll(vx, 1, axis=0)) / fx.grid.dx
    dyp = (vy - np.roll(vy, 1, axis=1)) / fx.grid.dy
    return RealField(fx.grid, dxp + dyp)


def fd_laplacian(f: RealField) -> RealField:
    """5-point Laplacian (composition of fd_div and fd_grad)."""
    v = f.values
    lap = (np.roll(v, -1, axis=0) + np.roll(v, 1, axis=0) - 2.0 * v) / f.grid.dx**2
    lap = lap + (np.roll(v, -1, axis=1) + np.roll(v, 1, axis=1) - 2.0 * v) / f.grid.dy**2
    return RealField(f.grid, lap)
