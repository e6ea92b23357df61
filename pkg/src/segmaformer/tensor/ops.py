"""Differentiable neural-network primitives on top of :mod:`.core`."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ArgumentError, DimensionError
from .core import Tensor, make_node, unbroadcast

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, P]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    short, long_ = (la, lb) if len(la) <= len(lb) else (lb, la)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, p = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, p)
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    y = matmul(x, weight)
    return y + bias if bias is not None else y


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(t) for t in v)
    if len(v) != 3:
        raise ArgumentError(f"expected an int or a 3-tuple, got {v}")
    return v


def conv3d_output_shape(extent: Sequence[int], kernel, stride, padding) -> tuple[int, int, int]:
    k, s, p = _triple(kernel), _triple(stride), _triple(padding)
    out = []
    for n, ki, si, pi in zip(extent, k, s, p):
        if n + 2 * pi < ki:
            raise DimensionError(f"conv3d: kernel {k} larger than padded input extent {tuple(extent)} (padding {p})")
        out.append((n + 2 * pi - ki) // si + 1)
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation. ``x`` is ``[B, C, D, H, W]``, ``weight`` ``[O, C, kd, kh, kw]``."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv3d: input {x.shape} incompatible with weight {weight.shape}")
    s, p = _triple(stride), _triple(padding)
    k = weight.shape[2:]
    out_ext = conv3d_output_shape(x.shape[2:], k, s, p)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, :: s[0], :: s[1], :: s[2]][:, :, : out_ext[0], : out_ext[1], : out_ext[2]]
    # win: [B, C, Do, Ho, Wo, kd, kh, kw]
    out = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # [B, Do, Ho, Wo, O]
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # [B, Do, Ho, Wo, C, kd, kh, kw]
            cols = np.moveaxis(cols, 4, 1)  # [B, C, Do, Ho, Wo, kd, kh, kw]
            gxp = np.zeros_like(xp)
            Do, Ho, Wo = out_ext
            for a in range(k[0]):
                for b in range(k[1]):
                    for c in range(k[2]):
                        gxp[:, :, a : a + s[0] * Do : s[0], b : b + s[1] * Ho : s[1], c : c + s[2] * Wo : s[2]] += cols[
                            ..., a, b, c
                        ]
            D, H, W = x.shape[2:]
            gx = gxp[:, :, p[0] : p[0] + D, p[1] : p[1] + H, p[2] : p[2] + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "conv3d")


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution over the sequence axis.

    ``x`` is ``[B, L, c]``, ``weight`` ``[c, k]``; ``y_t = sum_j w[:, j] * x_{t-k+1+j} + b``
    with zeros before the first position.
    """
    B, L, c = x.shape
    if weight.ndim != 2 or weight.shape[0] != c:
        raise DimensionError(f"causal_conv1d: input {x.shape} incompatible with weight {weight.shape}")
    k = weight.shape[1]
    xp = np.concatenate([np.zeros((B, k - 1, c), dtype=x.dtype), x.data], axis=1)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += weight.data[:, j] * xp[:, j : j + L]
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + L] += g * weight.data[:, j]
            gx = gxp[:, k - 1 :]
        if weight.requires_grad:
            gw = np.stack([(g * xp[:, j : j + L]).sum(axis=(0, 1)) for j in range(k)], axis=1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "causal_conv1d")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    C = x.shape[-1]
    if C == 0:
        raise DimensionError("layer_norm over an empty channel axis")
    if eps <= 0:
        raise ArgumentError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        grads = []
        if x.requires_grad:
            gh = g * gamma.data if gamma is not None else g
            grads.append(inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, C).sum(axis=0) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.reshape(-1, C).sum(axis=0) if beta.requires_grad else None)
        return grads

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return make_node(out, parents, bw, "layer_norm")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),), "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = (0.5 * (1.0 + erf(x.data / _SQRT_2))).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_node(x.data * cdf, (x,), bw, "gelu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype, copy=False)
    return make_node(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), bw, "log_softmax")


def interp_matrix(n_in: int, scale: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (align_corners=False) as an ``[n_in*scale, n_in]`` matrix."""
    n_out = n_in * scale
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = max((o + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    return m


def _apply_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def upsample_trilinear(x: Tensor, scale) -> Tensor:
    """Trilinear upsampling of ``[B, C, D, H, W]`` by integer factor(s)."""
    scales = _triple(scale)
    if any(s < 1 for s in scales):
        raise ArgumentError(f"upsample scale must be >= 1, got {scale}")
    if x.ndim != 5:
        raise DimensionError(f"upsample_trilinear expects [B,C,D,H,W], got {x.shape}")
    if scales == (1, 1, 1):
        return make_node(x.data.copy(), (x,), lambda g: (g,), "upsample")
    mats = [interp_matrix(n, s, x.dtype) for n, s in zip(x.shape[2:], scales)]
    out = x.data
    for ax, m in enumerate(mats):
        out = _apply_axis(out, m, ax + 2)

    def bw(g):
        for ax, m in enumerate(mats):
            g = _apply_axis(g, m.T, ax + 2)
        return (np.ascontiguousarray(g),)

    return make_node(np.ascontiguousarray(out), (x,), bw, "upsample")
