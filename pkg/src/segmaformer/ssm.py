"""Selective state-space scan, a reference-style Mamba layer and the gated 3D Mamba block."""
from __future__ import annotations

import math

import numpy as np

from .embedding import tokens_from_volume, volume_from_tokens
from .errors import ConfigError, DimensionError, NumericError
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor, causal_conv1d, exp, make_node, neg, silu, softplus, split


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential selective scan.

    Shapes: ``x, delta: [b, L, c]``, ``A: [c, n]``, ``B, C: [b, L, n]``, ``D: [c]``.
    With ``h_0 = 0``::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
        y_t = <C_t, h_t> + D * x_t
    """
    b, L, c = x.shape
    n = A.shape[1]
    if delta.shape != x.shape or A.shape != (c, n) or B.shape != (b, L, n) or C.shape != (b, L, n) or D.shape != (c,):
        raise DimensionError(
            f"selective_scan: x{x.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
        )
    if not np.all(delta.data > 0):
        raise NumericError("selective_scan: delta must be strictly positive")

    dA = np.exp(delta.data[..., None] * A.data)  # [b, L, c, n]
    dBx = (delta.data * x.data)[..., None] * B.data[:, :, None, :]
    hs = np.empty_like(dA)
    h = np.zeros((b, c, n), dtype=x.dtype)
    for t in range(L):
        h = dA[:, t] * h + dBx[:, t]
        hs[:, t] = h
    y = np.einsum("blcn,bln->blc", hs, C.data) + D.data * x.data

    def bw(gy):
        gC = np.einsum("blc,blcn->bln", gy, hs) if C.requires_grad else None
        gD = (gy * x.data).reshape(-1, c).sum(axis=0) if D.requires_grad else None
        # reverse recurrence for dL/dh_t
        gh = np.empty_like(hs)
        acc = np.zeros((b, c, n), dtype=x.dtype)
        for t in range(L - 1, -1, -1):
            acc = acc + gy[:, t, :, None] * C.data[:, t, None, :]
            gh[:, t] = acc
            acc = acc * dA[:, t]
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_dA = gh * h_prev * dA  # d/d(delta*A) through the exponential
        gB_full = gh * B.data[:, :, None, :]  # shared factor for x and delta
        gdelta = (g_dA * A.data).sum(-1) + (gB_full.sum(-1) * x.data) if delta.requires_grad else None
        gA = np.einsum("blcn,blc->cn", g_dA, delta.data) if A.requires_grad else None
        gB = np.einsum("blcn,blc->bln", gh, delta.data * x.data) if B.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = gB_full.sum(-1) * delta.data + gy * D.data
        return gx, gdelta, gA, gB, gC, gD

    return make_node(y, (x, delta, A, B, C, D), bw, "selective_scan")


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class MambaLayer(Module):
    """Mamba-1 style mixer: in-proj -> causal conv -> SiLU -> selective scan, gated by SiLU(z)."""

    def __init__(self, dim: int, rng: np.random.Generator, state_dim: int = 16, expand: int = 2,
                 conv_width: int = 4, dt_min: float = 1e-3, dt_max: float = 1e-1, dtype=np.float32):
        self.dim = dim
        self.inner = expand * dim
        self.state_dim = state_dim
        self.dt_rank = math.ceil(dim / 16)
        di, n, r = self.inner, state_dim, self.dt_rank

        self.in_proj = Linear(dim, 2 * di, rng, bias=False, dtype=dtype)
        bound = 1.0 / math.sqrt(conv_width)
        self.conv_weight = Parameter(rng.uniform(-bound, bound, size=(di, conv_width)).astype(dtype))
        self.conv_bias = Parameter(rng.uniform(-bound, bound, size=di).astype(dtype))
        self.x_proj = Linear(di, r + 2 * n, rng, bias=False, dtype=dtype)
        self.dt_proj = Linear(r, di, rng, dtype=dtype)
        dt_std = r**-0.5
        self.dt_proj.weight.data[:] = rng.uniform(-dt_std, dt_std, size=(r, di))
        dt = rng.uniform(dt_min, dt_max, size=di)
        self.dt_proj.bias.data[:] = softplus_inverse(dt)
        self.A_log = Parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (di, 1))).astype(dtype))
        self.D = Parameter(np.ones(di, dtype=dtype))
        self.out_proj = Linear(di, dim, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ConfigError(f"Mamba layer built for {self.dim} channels, got input {x.shape}")
        di, n, r = self.inner, self.state_dim, self.dt_rank
        xb, z = split(self.in_proj(x), [di, di], axis=-1)
        xb = silu(causal_conv1d(xb, self.conv_weight, self.conv_bias))
        dt, Bs, Cs = split(self.x_proj(xb), [r, n, n], axis=-1)
        delta = softplus(self.dt_proj(dt))
        A = neg(exp(self.A_log))
        y = selective_scan(xb, delta, A, Bs, Cs, self.D)
        return self.out_proj(y * silu(z))


class MambaBlock(Module):
    """Gated Mamba block operating on a token sequence, with volume adapters.

    ``G = Mamba(LN(x))``; ``F = W_p(SiLU(W_a G) * SiLU(W_b LN(x)))``; ``x1 = x + F``;
    ``out = x1 + MLP(LN(x1))``.
    """

    def __init__(self, dim: int, rng: np.random.Generator, mlp_ratio: int = 4, state_dim: int = 16,
                 expand: int = 2, conv_width: int = 4, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.mamba = MambaLayer(dim, rng, state_dim=state_dim, expand=expand, conv_width=conv_width, dtype=dtype)
        self.w_a = Linear(dim, dim, rng, dtype=dtype)
        self.w_b = Linear(dim, dim, rng, dtype=dtype)
        self.w_p = Linear(dim, dim, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, mlp_ratio, rng, dtype=dtype)

    def forward_tokens(self, x_seq: Tensor) -> Tensor:
        x_hat = self.norm1(x_seq)
        g = self.mamba(x_hat)
        gate = silu(self.w_a(g)) * silu(self.w_b(x_hat))
        x1 = x_seq + self.w_p(gate)
        return x1 + self.mlp(self.norm2(x1))

    def forward(self, volume: Tensor) -> Tensor:
        grid = volume.shape[2:]
        return volume_from_tokens(self.forward_tokens(tokens_from_volume(volume)), grid)
