"""Grid/field layer: transform conventions and difference stencils."""

from __future__ import annotations

import numpy as np
import pytest

from hpelab.fields import (
    ComplexField,
    FieldError,
    GridSpec,
    RealField,
    dft2,
    fd_div,
    fd_grad,
    fd_laplacian,
    idft2,
    idft2_real,
    spectral_derivative,
    wavenumbers,
)


def brute_force_dft2(values: np.ndarray) -> np.ndarray:
    """O(N^2) direct-sum DFT, the independent oracle for the fast transform."""
    nx, ny = values.shape
    out = np.zeros((nx, ny), dtype=np.complex128)
    for k1 in range(nx):
        for k2 in range(ny):
            acc = 0.0 + 0.0j
            for i in range(nx):
                for j in range(ny):
                    phase = -2.0j * np.pi * (k1 * i / nx + k2 * j / ny)
                    acc += values[i, j] * np.exp(phase)
            out[k1, k2] = acc
    return out


def rng_field(grid: GridSpec, seed: int) -> RealField:
    rng = np.random.default_rng(seed)
    return RealField(grid, rng.standard_normal(grid.shape))


class TestGridSpec:
    def test_rejects_odd_and_tiny_grids(self):
        with pytest.raises(FieldError):
            GridSpec(5, 8)
        with pytest.raises(FieldError):
            GridSpec(8, 10, dx=0.0)
        with pytest.raises(FieldError):
            GridSpec(2, 2)

    def test_shape_helpers(self):
        g = GridSpec(8, 16, dx=0.5, dy=2.0)
        assert g.shape == (8, 16)
        assert g.n_cells == 128
        assert g.cell_area == 1.0


class TestFieldValues:
    def test_non_finite_rejected(self):
        g = GridSpec(4, 4)
        bad = np.zeros((4, 4))
        bad[1, 2] = np.nan
        with pytest.raises(FieldError):
            RealField(g, bad)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(FieldError):
            RealField(GridSpec(4, 4), np.zeros((4, 6)))

    def test_values_are_read_only(self):
        f = rng_field(GridSpec(8, 8), 0)
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0


class TestDft:
    def test_matches_brute_force_on_4x4(self):
        g = GridSpec(4, 4)
        f = rng_field(g, 1)
        fast = dft2(f).modes
        slow = brute_force_dft2(f.values)
        assert np.max(np.abs(fast - slow)) <= 1e-12 * np.max(np.abs(slow))

    def test_complex_matches_brute_force(self):
        g = GridSpec(4, 6)
        rng = np.random.default_rng(2)
        f = ComplexField(g, rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape))
        fast = dft2(f).modes
        slow = brute_force_dft2(f.values)
        assert np.max(np.abs(fast - slow)) <= 1e-12 * np.max(np.abs(slow))

    def test_round_trip_identity(self):
        for seed, shape in [(3, (8, 8)), (4, (16, 4)), (5, (64, 64))]:
            g = GridSpec(*shape)
            f = rng_field(g, seed)
            back = idft2(dft2(f)).values
            assert np.max(np.abs(back - f.values)) <= 1e-12

    def test_dc_mode_is_cell_sum(self):
        g = GridSpec(8, 8)
        f = rng_field(g, 6)
        assert dft2(f).modes[0, 0] == pytest.approx(np.sum(f.values), abs=1e-12)

    def test_parseval(self):
        # Unnormalized forward: sum|f|^2 = (1/N) sum|F|^2.
        for seed in range(5):
            g = GridSpec(16, 16)
            f = rng_field(g, 10 + seed)
            lhs = np.sum(np.abs(f.values) ** 2)
            rhs = np.sum(np.abs(dft2(f).modes) ** 2) / g.n_cells
            assert abs(lhs - rhs) <= 1e-10 * lhs

    def test_idft2_real_rejects_asymmetric_modes(self):
        g = GridSpec(4, 4)
        modes = np.zeros(g.shape, dtype=np.complex128)
        modes[1, 0] = 1.0 + 0.5j  # no Hermitian partner
        from hpelab.fields import SpectralField

        with pytest.raises(FieldError):
            idft2_real(SpectralField(g, modes))


class TestSpectralDerivative:
    def test_single_sine_mode(self):
        # d/dx sin(2*pi*x/nx) = (2*pi/nx) cos(2*pi*x/nx) on dx=1.
        g = GridSpec(32, 8)
        x = np.arange(g.nx)[:, None] * np.ones((1, g.ny))
        k = 2.0 * np.pi / g.nx
        f = RealField(g, np.sin(k * x))
        d = idft2_real(spectral_derivative(dft2(f), 1, 0)).values
        assert np.max(np.abs(d - k * np.cos(k * x))) <= 1e-12

    def test_mixed_orders_on_product_mode(self):
        g = GridSpec(16, 16, dx=0.5, dy=0.25)
        ax = 2.0 * np.pi / (g.nx * g.dx)
        ay = 2.0 * np.pi * 2 / (g.ny * g.dy)
        x = np.arange(g.nx)[:, None] * g.dx
        y = np.arange(g.ny)[None, :] * g.dy
        f = RealField(g, np.sin(ax * x) * np.cos(ay * y))
        # d2/dx2 then d1/dy1: -ax^2 sin(ax x) * (-ay sin(ay y))
        want = (-(ax**2) * np.sin(ax * x)) * (-ay * np.sin(ay * y))
        got = idft2_real(spectral_derivative(dft2(f), 2, 1)).values
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_odd_order_zeroes_nyquist(self):
        g = GridSpec(8, 8)
        # Pure Nyquist stripe along x: (-1)^i.
        f = RealField(g, np.cos(np.pi * np.arange(g.nx))[:, None] * np.ones((1, g.ny)))
        d1 = spectral_derivative(dft2(f), 1, 0).modes
        assert np.max(np.abs(d1)) == 0.0
        # Even order keeps it.
        d2 = spectral_derivative(dft2(f), 2, 0).modes
        assert np.max(np.abs(d2)) > 0.0

    def test_wavenumber_wrap_order(self):
        g = GridSpec(8, 8)
        kx, _ = wavenumbers(g)
        assert kx[0] == 0.0
        assert kx[1] == pytest.approx(2.0 * np.pi / 8)
        assert kx[4] == pytest.approx(-np.pi)  # Nyquist lands on the negative side
        assert kx[7] == pytest.approx(-2.0 * np.pi / 8)


class TestDifferenceStencils:
    def test_forward_difference_on_ramp(self):
        # f(i,j) = i*dx: slope 1 everywhere except the wrap row.
        g = GridSpec(8, 8, dx=0.5)
        f = RealField(g, np.arange(g.nx)[:, None] * g.dx * np.ones((1, g.ny)))
        gx, gy = fd_grad(f)
        want = np.ones(g.shape)
        want[-1, :] = -(g.nx - 1)
        assert np.array_equal(gx.values, want)
        assert np.array_equal(gy.values, np.zeros(g.shape))

    def test_divergence_is_negative_adjoint_of_gradient(self):
        # <grad f, (gx,gy)> == -<f, div(gx,gy)> exactly (no tolerance: both
        # sides are the same sums reordered).
        g = GridSpec(8, 12, dx=0.7, dy=1.3)
        for seed in range(5):
            f = rng_field(g, 20 + seed)
            u = rng_field(g, 40 + seed)
            v = rng_field(g, 60 + seed)
            fx, fy = fd_grad(f)
            lhs = np.sum(fx.values * u.values) + np.sum(fy.values * v.values)
            rhs = -np.sum(f.values * fd_div(u, v).values)
            assert lhs == pytest.approx(rhs, rel=1e-13)

    def test_laplacian_equals_div_of_grad(self):
        g = GridSpec(8, 8, dx=0.5, dy=2.0)
        f = rng_field(g, 7)
        composed = fd_div(*fd_grad(f)).values
        assert np.max(np.abs(fd_laplacian(f).values - composed)) <= 1e-13

    def test_laplacian_hand_stencil_4x4(self):
        g = GridSpec(4, 4)
        f = rng_field(g, 8)
        v = f.values
        want = np.zeros(g.shape)
        for i in range(4):
            for j in range(4):
                want[i, j] = (
                    v[(i + 1) % 4, j]
                    + v[(i - 1) % 4, j]
                    + v[i, (j + 1) % 4]
                    + v[i, (j - 1) % 4]
                    - 4.0 * v[i, j]
                )
        assert np.max(np.abs(fd_laplacian(f).values - want)) <= 1e-13

    def test_div_grid_mismatch_rejected(self):
        a = rng_field(GridSpec(4, 4), 0)
        b = rng_field(GridSpec(8, 8), 0)
        with pytest.raises(FieldError):
            fd_div(a, b)

    def test_constant_field_has_zero_derivatives(self):
        g = GridSpec(8, 8)
        f = RealField(g, np.full(g.shape, 3.25))
        gx, gy = fd_grad(f)
        assert np.max(np.abs(gx.values)) == 0.0
        assert np.max(np.abs(gy.values)) == 0.0
        s = spectral_derivative(dft2(f), 1, 0)
        assert np.max(np.abs(idft2(s).values)) <= 1e-12
