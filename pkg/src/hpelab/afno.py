"""Fourier-attention surrogate block: patch embed, frequency MLP, channel MLP.

Input fields (C_in, nx, ny) are cut into non-overlapping patches, projected
to an embedding on the token lattice, and pushed through ``depth`` blocks of

    tokens += real(IDFT2( softshrink( W2 . gelu(W1 . DFT2(tokens)) + b ) ))
    tokens += channel_mlp(tokens)            (d -> ratio*d -> d, dropout)

before a linear head projects every token back to its pixel patch. The
frequency MLP is block-diagonal over the embedding (num_blocks blocks, the
same weights at every lattice mode) with a 2x hidden widening inside each
block, and a sparsity-promoting soft shrink on the output modes. All shapes
below are written for row-major (x index first) grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import GridSpec

FREQ_HIDDEN_FACTOR = 2  # hidden width of the frequency MLP, in block widths


@dataclass(frozen=True)
class AFNOConfig:
    in_channels: int
    out_channels: int
    patch: tuple[int, int] = (4, 4)
    embed_dim: int = 32
    num_blocks: int = 2
    depth: int = 1
    mlp_ratio: float = 2.0
    dropout: float = 0.3
    sparsity_threshold: float = 0.01
    hard_threshold_fraction: float = 1.0
    activation: str = "gelu"  # "identity" linearizes both MLPs (used by tests)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.embed_dim % self.num_blocks != 0:
            raise ValueError("embed_dim must divide into num_blocks blocks")
        if not (0.0 < self.hard_threshold_fraction <= 1.0):
            raise ValueError("hard_threshold_fraction must be in (0, 1]")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def block_size(self) -> int:
        return self.embed_dim // self.num_blocks

    def token_grid(self, grid: GridSpec) -> tuple[int, int]:
        px, py = self.patch
        if grid.nx % px != 0 or grid.ny % py != 0:
            raise ValueError(f"patch {self.patch} does not tile grid {grid.shape}")
        return grid.nx // px, grid.ny // py


@dataclass
class AFNOLayerParams:
    freq_w1: Tensor  # complex (num_blocks, bs, FREQ_HIDDEN_FACTOR*bs)
    freq_w2: Tensor  # complex (num_blocks, FREQ_HIDDEN_FACTOR*bs, bs)
    freq_b: Tensor   # complex (embed_dim,)
    mlp_w1: Tensor   # (d, ratio*d)
    mlp_b1: Tensor
    mlp_w2: Tensor   # (ratio*d, d)
    mlp_b2: Tensor


@dataclass
class AFNOParams:
    config: AFNOConfig
    grid: GridSpec
    patch_w: Tensor  # (in_ch*px*py, d)
    patch_b: Tensor  # (d,)
    pos: Tensor      # (h, w, d) positional table, zero-initialized
    layers: list[AFNOLayerParams]
    head_w: Tensor   # (d, out_ch*px*py)
    head_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("patch_w", self.patch_w), ("patch_b", self.patch_b), ("pos", self.pos)]
        for i, layer in enumerate(self.layers):
            for name in ("freq_w1", "freq_w2", "freq_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
                out.append((f"layers.{i}.{name}", getattr(layer, name)))
        out.append(("head_w", self.head_w))
        out.append(("head_b", self.head_b))
        return out

    def param_count(self) -> int:
        """Real scalar count; complex entries count twice."""
        total = 0
        for _, t in self.named_tensors():
            total += t.data.size * (2 if t.is_complex else 1)
        return total


def afno_param_count(config: AFNOConfig, grid: GridSpec) -> int:
    """Closed-form parameter count for shape assertions."""
    px, py = config.patch
    h, w = config.token_grid(grid)
    d = config.embed_dim
    bs = config.block_size
    hidden = FREQ_HIDDEN_FACTOR * bs
    mlp_hidden = int(config.mlp_ratio * d)
    per_layer = (
        2 * (config.num_blocks * bs * hidden)      # freq_w1, complex
        + 2 * (config.num_blocks * hidden * bs)    # freq_w2, complex
        + 2 * d                                    # freq_b, complex
        + d * mlp_hidden + mlp_hidden              # mlp_w1, mlp_b1
        + mlp_hidden * d + d                       # mlp_w2, mlp_b2
    )
    return (
        config.in_channels * px * py * d + d       # patch projection
        + h * w * d                                # positional table
        + config.depth * per_layer
        + d * config.out_channels * px * py + config.out_channels * px * py
    )


def init_afno_params(config: AFNOConfig, grid: GridSpec, seed: int) -> AFNOParams:
    """Seeded init: uniform +-1/sqrt(fan_in) projections, 0.02-scaled normal
    frequency weights, zero positional table."""
    rng = np.random.default_rng(seed)
    px, py = config.patch
    h, w = config.token_grid(grid)
    d = config.embed_dim
    bs = config.block_size
    hidden = FREQ_HIDDEN_FACTOR * bs
    mlp_hidden = int(config.mlp_ratio * d)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def freq_normal(shape):
        re = rng.standard_normal(shape)
        im = rng.standard_normal(shape)
        return Tensor(0.02 * (re + 1j * im), requires_grad=True)

    patch_fan = config.in_channels * px * py
    layers = []
    for _ in range(config.depth):
        layers.append(
            AFNOLayerParams(
                freq_w1=freq_normal((config.num_blocks, bs, hidden)),
                freq_w2=freq_normal((config.num_blocks, hidden, bs)),
                freq_b=freq_normal((d,)),
                mlp_w1=uniform((d, mlp_hidden), d),
                mlp_b1=uniform((mlp_hidden,), d),
                mlp_w2=uniform((mlp_hidden, d), mlp_hidden),
                mlp_b2=uniform((d,), mlp_hidden),
            )
        )
    return AFNOParams(
        config=config,
        grid=grid,
        patch_w=uniform((patch_fan, d), patch_fan),
        patch_b=uniform((d,), patch_fan),
        pos=Tensor(np.zeros((h, w, d)), requires_grad=True),
        layers=layers,
        head_w=uniform((d, config.out_channels * px * py), d),
        head_b=uniform((config.out_channels * px * py,), d),
    )


# ----- forward pieces -----


def patchify(x: Tensor, patch: tuple[int, int]) -> Tensor:
    """(C, nx, ny) -> (h, w, C*px*py) token features."""
    c, nx, ny = x.shape
    px, py = patch
    t = ad.reshape(x, (c, nx // px, px, ny // py, py))
    t = ad.transpose(t, (1, 3, 0, 2, 4))
    return ad.reshape(t, (nx // px, ny // py, c * px * py))


def unpatchify(tokens: Tensor, patch: tuple[int, int], out_channels: int) -> Tensor:
    """(h, w, C*px*py) -> (C, nx, ny)."""
    h, w, _ = tokens.shape
    px, py = patch
    t = ad.reshape(tokens, (h, w, out_channels, px, py))
    t = ad.transpose(t, (2, 0, 3, 1, 4))
    return ad.reshape(t, (out_channels, h * px, w * py))


def patch_embed(fields: Tensor, params: AFNOParams) -> Tensor:
    cfg = params.config
    tokens = patchify(fields, cfg.patch) @ params.patch_w + params.patch_b
    return tokens + params.pos


def _activation(cfg: AFNOConfig, x: Tensor) -> Tensor:
    return ad.gelu(x) if cfg.activation == "gelu" else x


def mode_mask(h: int, w: int, fraction: float) -> np.ndarray | None:
    """Keep wrapped modes with |k| <= fraction * (n/2) on each axis."""
    if fraction >= 1.0:
        return None
    kx = np.abs(np.fft.fftfreq(h) * h)
    ky = np.abs(np.fft.fftfreq(w) * w)
    keep = (kx[:, None] <= fraction * (h / 2)) & (ky[None, :] <= fraction * (w / 2))
    return keep[:, :, None].astype(np.float64)


def fourier_mix(tokens: Tensor, layer: AFNOLayerParams, cfg: AFNOConfig) -> Tensor:
    """Frequency-domain token mixing with a shared block-diagonal MLP."""
    h, w, d = tokens.shape
    bs = cfg.block_size
    z = ad.dft2(tokens, axes=(0, 1))
    z = ad.reshape(z, (h, w, cfg.num_blocks, bs))
    hid = _activation(cfg, ad.block_mix(z, layer.freq_w1))
    z2 = ad.block_mix(hid, layer.freq_w2)
    z2 = ad.reshape(z2, (h, w, d)) + layer.freq_b
    z2 = ad.softshrink(z2, cfg.sparsity_threshold)
    mask = mode_mask(h, w, cfg.hard_threshold_fraction)
    if mask is not None:
        z2 = z2 * Tensor(mask)
    mixed = ad.real(ad.idft2(z2, axes=(0, 1)))
    return mixed + tokens


def channel_mlp(
    tokens: Tensor, layer: AFNOLayerParams, cfg: AFNOConfig, train: bool, seed: int
) -> Tensor:
    """Tokenwise d -> ratio*d -> d MLP with dropout, residual added."""
    y = _activation(cfg, tokens @ layer.mlp_w1 + layer.mlp_b1)
    y = ad.dropout(y, cfg.dropout, seed=seed, train=train)
    y = y @ layer.mlp_w2 + layer.mlp_b2
    y = ad.dropout(y, cfg.dropout, seed=seed + 1, train=train)
    return y + tokens


def afno_forward(
    fields: Tensor, params: AFNOParams, train: bool = False, dropout_seed: int = 0
) -> Tensor:
    """(C_in, nx, ny) -> (C_out, nx, ny)."""
    cfg = params.config
    if fields.shape != (cfg.in_channels, params.grid.nx, params.grid.ny):
        raise ValueError(
            f"expected input {(cfg.in_channels, *params.grid.shape)}, got {fields.shape}"
        )
    tokens = patch_embed(fields, params)
    for i, layer in enumerate(params.layers):
        tokens = fourier_mix(tokens, layer, cfg)
        tokens = channel_mlp(tokens, layer, cfg, train, seed=dropout_seed + 101 * i)
    out = tokens @ params.head_w + params.head_b
    return unpatchify(out, cfg.patch, cfg.out_channels)
