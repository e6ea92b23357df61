"""Overlapped 3D patch embedding and axis-wise rotary position embedding."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Module, Parameter
from .tensor import Tensor, conv3d, conv3d_output_shape, make_node


@dataclass(frozen=True)
class PatchEmbedConfig:
    in_channels: int
    embed_dim: int
    kernel: int = 7
    stride: int = 4
    padding: int = 3

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"bad patch geometry k={self.kernel} s={self.stride} p={self.padding}")
        if self.kernel < self.stride:
            raise ConfigError(f"patch kernel {self.kernel} smaller than stride {self.stride}; patches would not overlap")

    def output_extent(self, extent) -> tuple[int, int, int]:
        return conv3d_output_shape(extent, self.kernel, self.stride, self.padding)


def grid_coords(grid) -> np.ndarray:
    """Integer (z, y, x) coordinates of every token of ``grid``, row-major, shape ``[N, 3]``."""
    d, h, w = grid
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([z.ravel(), y.ravel(), x.ravel()], axis=1)


@dataclass
class TokenGrid:
    tokens: Tensor  # [B, N, C]
    grid: tuple[int, int, int]

    def __post_init__(self):
        n = int(np.prod(self.grid))
        if self.tokens.shape[1] != n:
            raise DimensionError(f"token count {self.tokens.shape[1]} != prod(grid {self.grid}) = {n}")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    def coords(self) -> np.ndarray:
        return grid_coords(self.grid)


def tokens_from_volume(x: Tensor) -> Tensor:
    """``[B, C, D, H, W]`` -> ``[B, D*H*W, C]`` (row-major z, y, x)."""
    B, C = x.shape[:2]
    return x.reshape(B, C, -1).permute(0, 2, 1)


def volume_from_tokens(t: Tensor, grid) -> Tensor:
    B, _, C = t.shape
    return t.permute(0, 2, 1).reshape(B, C, *grid)


class PatchEmbed(Module):
    def __init__(self, cfg: PatchEmbedConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        k = cfg.kernel
        fan_out = k**3 * cfg.embed_dim
        self.proj_weight = Parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan_out), size=(cfg.embed_dim, cfg.in_channels, k, k, k)).astype(dtype)
        )
        self.proj_bias = Parameter(np.zeros(cfg.embed_dim, dtype=dtype))
        self.norm = LayerNorm(cfg.embed_dim, dtype=dtype)

    def forward(self, volume: Tensor) -> TokenGrid:
        y = conv3d(volume, self.proj_weight, self.proj_bias, stride=self.cfg.stride, padding=self.cfg.padding)
        grid = tuple(y.shape[2:])
        return TokenGrid(self.norm(tokens_from_volume(y)), grid)


def patch_embed(volume: Tensor, cfg: PatchEmbedConfig, rng: np.random.Generator | None = None) -> TokenGrid:
    """One-shot functional form with freshly initialised weights (mostly for shape checks)."""
    rng = rng or np.random.default_rng(0)
    return PatchEmbed(cfg, rng, dtype=volume.dtype)(volume)


@dataclass(frozen=True)
class RotaryFrequencies:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 6:
            raise ConfigError(f"rotary head_dim must be a positive multiple of 6, got {self.head_dim}")

    @property
    def group_width(self) -> int:
        return self.head_dim // 3

    @cached_property
    def theta(self) -> np.ndarray:
        j = np.arange(self.head_dim // 6)
        return self.base ** (-2.0 * j / self.group_width)

    def tables(self, coords: np.ndarray, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin of every rotation angle, shape ``[N, head_dim/2]``.

        Pair ``p`` of axis group ``a`` (z, y, x) uses angle ``coords[:, a] * theta[p]``.
        """
        coords = np.asarray(coords, dtype=np.float64)
        angles = np.concatenate([coords[:, a : a + 1] * self.theta[None, :] for a in range(3)], axis=1)
        return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) channel pairs of ``x[..., N, d]``; cos/sin are ``[N, d/2]``."""
    shape = x.shape
    xv = x.data.reshape(*shape[:-1], shape[-1] // 2, 2)
    x0, x1 = xv[..., 0], xv[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1).reshape(shape)

    def bw(g):
        gv = g.reshape(*shape[:-1], shape[-1] // 2, 2)
        g0, g1 = gv[..., 0], gv[..., 1]
        return (np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1).reshape(shape),)

    return make_node(out, (x,), bw, "rope3d")


def apply_rope3d(x: Tensor, coords: np.ndarray, freqs: RotaryFrequencies) -> Tensor:
    """Rotate per-head features ``[..., N, head_dim]`` by their (z, y, x) grid coordinates."""
    if x.shape[-1] != freqs.head_dim:
        raise ConfigError(f"feature width {x.shape[-1]} != rotary head_dim {freqs.head_dim}")
    if len(coords) != x.shape[-2]:
        raise DimensionError(f"{len(coords)} coordinates for {x.shape[-2]} tokens")
    cos, sin = freqs.tables(coords, x.dtype)
    return _rotate_pairs(x, cos, sin)


def rope_tokens(tokens: Tensor, coords: np.ndarray, heads: int, base: float = 10000.0) -> Tensor:
    """Apply :func:`apply_rope3d` to ``[B, N, C]`` tokens split into ``heads`` equal heads."""
    C = tokens.shape[-1]
    if C % heads:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    freqs = RotaryFrequencies(C // heads, base)
    if len(coords) != tokens.shape[-2]:
        raise DimensionError(f"{len(coords)} coordinates for {tokens.shape[-2]} tokens")
    cos, sin = freqs.tables(coords, tokens.dtype)
    return _rotate_pairs(tokens, np.tile(cos, (1, heads)), np.tile(sin, (1, heads)))
