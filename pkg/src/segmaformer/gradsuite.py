"""Finite-difference gradient suite over every differentiable op and both block types.

Each case builds a scalar objective ``sum(op(inputs) * W)`` with a fixed random ``W``
so that every output coordinate contributes a distinct weight, then compares the
autodiff gradient against central differences in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .attention import MultiHeadAttention, TransformerBlock, reduce_keys
from .embedding import PatchEmbed, PatchEmbedConfig, RotaryFrequencies, apply_rope3d, grid_coords
from .network import SegMaFormer, tiny_config
from .nn import Linear, Module
from .ssm import MambaBlock, MambaLayer, selective_scan
from .tensor import GradCheckReport, Tensor, grad_check
from .training.losses import combined_loss, cross_entropy, dice_loss

F64 = np.float64
Builder = Callable[[np.random.Generator, int], tuple[Callable[..., Tensor], list[Tensor]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    module: str
    build: Builder
    max_coords: int | None = None


@dataclass
class GradResult:
    case: str
    module: str
    variant: int
    report: GradCheckReport


def _t(rng, shape, lo=None, hi=None) -> Tensor:
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(np.asarray(data, dtype=F64), requires_grad=True)


def _weighted(op: Callable[..., Tensor], out_shape, rng) -> Callable[..., Tensor]:
    w = Tensor(rng.normal(size=out_shape))
    return lambda *xs: (op(*xs) * w).sum()


def _objective(op, inputs, rng):
    with T.no_grad():
        shape = op(*inputs).shape
    return _weighted(op, shape, rng), inputs


def _jitter(module: Module, rng, scale: float = 0.3) -> list[Tensor]:
    params = module.parameters()
    for p in params:
        p.data += rng.normal(0.0, scale, size=p.shape)
    return params


def _module_case(make, call, input_shape):
    def build(rng, v):
        m = make(rng, v)
        params = _jitter(m, rng)
        x = _t(rng, input_shape(v))
        fn = lambda x_, *ps: call(m, x_, v)  # noqa: E731  params are perturbed in place
        return _objective(fn, [x, *params], rng)

    return build


# ------------------------------------------------------------------ elementwise / structural
_SHAPES = [(3, 4), (2, 3, 5), (4, 1, 2, 3)]


def _unary(op, lo=None, hi=None):
    return lambda rng, v: _objective(op, [_t(rng, _SHAPES[v], lo, hi)], rng)


def _binary(op, broadcast=True, lo=None, hi=None):
    def build(rng, v):
        a = _t(rng, _SHAPES[v])
        b_shape = _SHAPES[v][1:] if broadcast and v else _SHAPES[v]
        b = _t(rng, b_shape, lo, hi)
        return _objective(op, [a, b], rng)

    return build


def _conv3d(rng, v):
    B, Cin, Cout, E, k, s, p = [(1, 2, 3, 5, 3, 1, 1), (2, 1, 2, 6, 3, 2, 1), (1, 3, 2, 7, 5, 2, 2)][v]
    x, w, b = _t(rng, (B, Cin, E, E, E)), _t(rng, (Cout, Cin, k, k, k)), _t(rng, (Cout,))
    return _objective(lambda x_, w_, b_: T.conv3d(x_, w_, b_, stride=s, padding=p), [x, w, b], rng)


def _causal_conv1d(rng, v):
    B, L, c, k = [(1, 5, 2, 4), (2, 7, 3, 4), (2, 3, 4, 2)][v]
    return _objective(T.causal_conv1d, [_t(rng, (B, L, c)), _t(rng, (c, k)), _t(rng, (c,))], rng)


def _layer_norm(rng, v):
    shape = [(3, 6), (2, 4, 5), (2, 2, 2, 8)][v]
    return _objective(T.layer_norm, [_t(rng, shape), _t(rng, shape[-1:]), _t(rng, shape[-1:])], rng)


def _matmul(rng, v):
    a, b = [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3, 4), (2, 2, 4, 3))][v]
    return _objective(T.matmul, [_t(rng, a), _t(rng, b)], rng)


def _linear(rng, v):
    x, i, o = [((3, 4), 4, 2), ((2, 3, 5), 5, 3), ((2, 2, 2, 3), 3, 6)][v]
    return _objective(T.linear, [_t(rng, x), _t(rng, (i, o)), _t(rng, (o,))], rng)


def _concat(rng, v):
    axis = [0, 1, -1][v]
    a = _t(rng, (2, 3, 4))
    shape = list(a.shape)
    shape[axis] = 2
    return _objective(lambda x, y: T.concat([x, y, x], axis=axis), [a, _t(rng, tuple(shape))], rng)


def _split(rng, v):
    sizes, axis = [([1, 3], -1), ([2, 1, 1], 0), ([3, 2], 1)][v]
    shape = [(2, 4), (4, 3), (2, 5, 2)][v]

    def op(x):
        parts = T.split(x, sizes, axis=axis)
        return T.concat([p * float(i + 1) for i, p in enumerate(parts)], axis=axis)

    return _objective(op, [_t(rng, shape)], rng)


def _getitem(rng, v):
    idx = [(slice(1, 3),), (Ellipsis, 0), (slice(None), [0, 2, 2])][v]
    return _objective(lambda x: T.getitem(x, idx), [_t(rng, (4, 3, 3))], rng)


def _reduce(op, axis_by_variant):
    return lambda rng, v: _objective(lambda x: op(x, axis=axis_by_variant[v]), [_t(rng, _SHAPES[v])], rng)


def _softmax_like(op):
    return lambda rng, v: _objective(lambda x: op(x, axis=[-1, 1, 0][v]), [_t(rng, _SHAPES[v])], rng)


def _upsample(rng, v):
    shape, scale = [((1, 1, 2, 3, 2), 2), ((1, 2, 3, 2, 2), (1, 2, 3)), ((2, 1, 2, 2, 2), 3)][v]
    return _objective(lambda x: T.upsample_trilinear(x, scale), [_t(rng, shape)], rng)


# ------------------------------------------------------------------ model components
def _rope(rng, v):
    N, d = [(5, 6), (7, 12), (4, 18)][v]
    freqs = RotaryFrequencies(d)
    coords = rng.integers(0, 9, size=(N, 3)).astype(F64)
    return _objective(lambda x: apply_rope3d(x, coords, freqs), [_t(rng, (2, N, d))], rng)


def _patch_embed(rng, v):
    cin, cout, k, s, p, E = [(1, 4, 3, 2, 1, 4), (2, 3, 3, 1, 1, 3), (1, 2, 5, 2, 2, 5)][v]
    pe = PatchEmbed(PatchEmbedConfig(cin, cout, k, s, p), rng, dtype=F64)
    params = _jitter(pe, rng)
    x = _t(rng, (1, cin, E, E, E))
    return _objective(lambda x_, *ps: pe(x_).tokens, [x, *params], rng)


def _selective_scan(rng, v):
    b, L, c, n = [(1, 4, 2, 3), (2, 6, 3, 2), (1, 9, 2, 4)][v]
    inputs = [
        _t(rng, (b, L, c)),
        _t(rng, (b, L, c), 0.1, 1.0),  # delta > 0
        _t(rng, (c, n), -1.5, -0.2),
        _t(rng, (b, L, n)),
        _t(rng, (b, L, n)),
        _t(rng, (c,)),
    ]
    return _objective(selective_scan, inputs, rng)


def _reduce_keys(rng, v):
    B, N, C, r = [(1, 4, 3, 2), (2, 6, 2, 3), (1, 4, 2, 1)][v]
    proj = Linear(C * r, C, rng, dtype=F64)
    params = _jitter(proj, rng)
    return _objective(lambda k, *ps: reduce_keys(k, r, proj), [_t(rng, (B, N, C)), *params], rng)


_ATTN_SHAPES = [(1, 4, 12, 2, 1), (2, 8, 6, 1, 2), (1, 8, 12, 2, 2)]  # B, N, C, heads, r


def _attn_coords(N):
    return grid_coords((2, 2, N // 4)).astype(F64)


_mha = _module_case(
    lambda rng, v: MultiHeadAttention(_ATTN_SHAPES[v][2], _ATTN_SHAPES[v][3], rng, reduction=_ATTN_SHAPES[v][4], dtype=F64),
    lambda m, x, v: m(x, _attn_coords(_ATTN_SHAPES[v][1])),
    lambda v: _ATTN_SHAPES[v][:3],
)
_transformer_block = _module_case(
    lambda rng, v: TransformerBlock(_ATTN_SHAPES[v][2], _ATTN_SHAPES[v][3], rng, mlp_ratio=2,
                                    reduction=_ATTN_SHAPES[v][4], dtype=F64),
    lambda m, x, v: m.forward_tokens(x, _attn_coords(_ATTN_SHAPES[v][1])),
    lambda v: _ATTN_SHAPES[v][:3],
)

_MAMBA_SHAPES = [(1, 5, 4, 2), (2, 4, 6, 3), (1, 8, 8, 4)]  # B, L, C, state
_mamba_layer = _module_case(
    lambda rng, v: MambaLayer(_MAMBA_SHAPES[v][2], rng, state_dim=_MAMBA_SHAPES[v][3], dtype=F64),
    lambda m, x, v: m(x),
    lambda v: _MAMBA_SHAPES[v][:3],
)
_mamba_block = _module_case(
    lambda rng, v: MambaBlock(_MAMBA_SHAPES[v][2], rng, mlp_ratio=2, state_dim=_MAMBA_SHAPES[v][3], dtype=F64),
    lambda m, x, v: m.forward_tokens(x),
    lambda v: _MAMBA_SHAPES[v][:3],
)


# ------------------------------------------------------------------ losses and whole network
def _loss_case(loss_fn):
    def build(rng, v):
        B, K, E = [(1, 2, 3), (2, 3, 2), (1, 4, 3)][v]
        labels = rng.integers(0, K, size=(B, E, E, E))
        return (lambda lg: loss_fn(lg, labels)), [_t(rng, (B, K, E, E, E))]

    return build


def _network(rng, v):
    ds = v == 2
    cfg = tiny_config(in_channels=[1, 2, 1][v], num_classes=[2, 3, 3][v], deep_supervision=ds)
    model = SegMaFormer(cfg, seed=int(rng.integers(1 << 30)), dtype=F64)
    params = _jitter(model, rng, 0.1)
    x = _t(rng, (1, cfg.in_channels, 16, 16, 16))
    labels = rng.integers(0, cfg.num_classes, size=(1, 16, 16, 16))

    def f(x_, *ps):
        out = model(x_)
        aux = out.aux if ds else ()
        return combined_loss(out.full, labels, aux_logits=aux, aux_weights=cfg.ds_weights if ds else ())

    return f, [x, *params]


GRAD_CHECKS: list[GradCase] = [
    GradCase("add", "tensor", _binary(T.add)),
    GradCase("sub", "tensor", _binary(T.sub)),
    GradCase("mul", "tensor", _binary(T.mul)),
    GradCase("div", "tensor", _binary(T.div, lo=0.5, hi=2.0)),
    GradCase("neg", "tensor", _unary(T.neg)),
    GradCase("exp", "tensor", _unary(T.exp)),
    GradCase("log", "tensor", _unary(T.log, 0.3, 3.0)),
    GradCase("sum", "tensor", _reduce(T.tsum, [None, 1, (0, 2)])),
    GradCase("mean", "tensor", _reduce(T.mean, [0, -1, (1, 3)])),
    GradCase("reshape", "tensor", _unary(lambda x: T.reshape(x, (-1,)))),
    GradCase("permute", "tensor", _unary(lambda x: T.permute(x, tuple(reversed(range(x.ndim)))))),
    GradCase("concat", "tensor", _concat),
    GradCase("split", "tensor", _split),
    GradCase("getitem", "tensor", _getitem),
    GradCase("matmul", "tensor", _matmul),
    GradCase("linear", "tensor", _linear),
    GradCase("conv3d", "tensor", _conv3d),
    GradCase("causal_conv1d", "tensor", _causal_conv1d),
    GradCase("layer_norm", "tensor", _layer_norm),
    GradCase("sigmoid", "tensor", _unary(T.sigmoid)),
    GradCase("silu", "tensor", _unary(T.silu)),
    GradCase("gelu", "tensor", _unary(T.gelu)),
    GradCase("softplus", "tensor", _unary(T.softplus)),
    GradCase("softmax", "tensor", _softmax_like(T.softmax)),
    GradCase("log_softmax", "tensor", _softmax_like(T.log_softmax)),
    GradCase("upsample_trilinear", "tensor", _upsample),
    GradCase("patch_embed", "embedding", _patch_embed),
    GradCase("rope3d", "embedding", _rope),
    GradCase("selective_scan", "ssm", _selective_scan),
    GradCase("mamba_layer", "ssm", _mamba_layer, max_coords=120),
    GradCase("mamba_block", "ssm", _mamba_block, max_coords=120),
    GradCase("reduce_keys", "attention", _reduce_keys),
    GradCase("multi_head_attention", "attention", _mha, max_coords=120),
    GradCase("transformer_block", "attention", _transformer_block, max_coords=120),
    GradCase("dice_loss", "training", _loss_case(dice_loss)),
    GradCase("cross_entropy", "training", _loss_case(cross_entropy)),
    GradCase("combined_loss", "training", _loss_case(combined_loss)),
    GradCase("segmaformer", "network", _network, max_coords=60),
]

MODULES = sorted({c.module for c in GRAD_CHECKS})


def run_suite(
    module: str | None = None,
    cases: Iterable[GradCase] | None = None,
    variants: int = 3,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    on_result: Callable[[GradResult], None] | None = None,
) -> list[GradResult]:
    """Check every case (optionally only those of ``module``) on ``variants`` shapes."""
    cases = GRAD_CHECKS if cases is None else list(cases)
    results = []
    for ci, case in enumerate(cases):
        if module is not None and case.module != module:
            continue
        for v in range(variants):
            rng = np.random.default_rng([seed, ci, v])
            f, inputs = case.build(rng, v)
            rep = grad_check(f, inputs, h=h, tol=tol, max_coords=case.max_coords, rng=rng)
            res = GradResult(case.name, case.module, v, rep)
            results.append(res)
            if on_result:
                on_result(res)
    return results
