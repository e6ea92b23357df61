"""Multi-head self-attention with sequence reduction of keys/values, and the transformer block."""
from __future__ import annotations

import math

import numpy as np

from .embedding import RotaryFrequencies, apply_rope3d, grid_coords, tokens_from_volume, volume_from_tokens
from .errors import ArgumentError, ConfigError
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor, matmul, softmax


def reduce_keys(k: Tensor, r: int, proj: Linear) -> Tensor:
    """``[B, N, C] -> [B, N/r, C]``: fold ``r`` consecutive tokens into one ``C*r`` vector, project to ``C``."""
    B, N, C = k.shape
    if r < 1 or N % r:
        raise ArgumentError(f"sequence length {N} not divisible by reduction ratio {r}")
    if proj.in_features != C * r or proj.out_features != C:
        raise ConfigError(f"reduction map is {proj.in_features}->{proj.out_features}, need {C * r}->{C}")
    folded = k if r == 1 else k.reshape(B, N // r, C * r)
    return proj(folded)


def reduce_coords(coords: np.ndarray, r: int) -> np.ndarray:
    """Position of a folded token: the mean coordinate of the ``r`` tokens it merges."""
    if r == 1:
        return coords
    return coords.reshape(len(coords) // r, r, 3).mean(axis=1)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, reduction: int = 1,
                 use_rope: bool = True, rope_base: float = 10000.0, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        if reduction < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {reduction}")
        self.dim, self.heads, self.reduction = dim, heads, reduction
        self.head_dim = dim // heads
        self.use_rope = use_rope
        self.freqs = RotaryFrequencies(self.head_dim, rope_base) if use_rope else None
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.kv_reduce = Linear(dim * reduction, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.keep_attention = False
        self.last_attention: np.ndarray | None = None

    def _heads(self, t: Tensor) -> Tensor:
        B, N, _ = t.shape
        return t.reshape(B, N, self.heads, self.head_dim).permute(0, 2, 1, 3)

    def forward(self, x: Tensor, coords: np.ndarray | None = None) -> Tensor:
        B, N, C = x.shape
        if N < 1:
            raise ArgumentError("attention over an empty sequence")
        q = self._heads(self.q(x))
        k = self._heads(reduce_keys(self.k(x), self.reduction, self.kv_reduce))
        v = self._heads(reduce_keys(self.v(x), self.reduction, self.kv_reduce))
        if self.use_rope:
            if coords is None:
                raise ArgumentError("rotary attention needs token coordinates")
            q = apply_rope3d(q, coords, self.freqs)
            k = apply_rope3d(k, reduce_coords(coords, self.reduction), self.freqs)
        scores = matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        attn = softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data.copy()
        out = matmul(attn, v).permute(0, 2, 1, 3).reshape(B, N, C)
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4, reduction: int = 1,
                 use_rope: bool = True, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, reduction=reduction, use_rope=use_rope, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, mlp_ratio, rng, dtype=dtype)

    def forward_tokens(self, x: Tensor, coords: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), coords)
        return x + self.mlp(self.norm2(x))

    def forward(self, volume: Tensor) -> Tensor:
        grid = volume.shape[2:]
        out = self.forward_tokens(tokens_from_volume(volume), grid_coords(grid))
        return volume_from_tokens(out, grid)
