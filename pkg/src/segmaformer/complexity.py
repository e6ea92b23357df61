"""Closed-form parameter and FLOP accounting for :class:`~segmaformer.network.SegMaFormer`.

Counting convention (batch size 1):

* one multiply-accumulate = 2 FLOPs, so an ``[M, K] @ [K, P]`` product costs ``2*M*K*P``;
  bias adds, residual adds and gating products cost 1 FLOP per element;
* per element: softmax 5, layer norm 8, SiLU 4, GELU 8, softplus 4;
* rotary embedding 3 per rotated element; trilinear upsampling 16 per output element;
* selective scan: 2 state MACs (update + readout) and 4 FLOPs of discretisation per
  (token, channel, state), plus the ``D * x`` skip MAC per (token, channel);
* work that depends only on parameters (e.g. ``A = -exp(A_log)``) is not counted.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

from .network import ModelConfig
from .tensor import conv3d_output_shape

PUBLISHED_PARAMS_M = 2.02
PUBLISHED_GFLOPS = 15.2
# Published complexity of reference architectures (params in M, GFLOPs); reported, never recomputed.
PUBLISHED_COMPARISON = [
    ("nnFormer", 150.5, 213.4),
    ("TransUNet", 96.07, 88.91),
    ("UNETR", 92.49, 75.76),
    ("SwinUNETR", 62.83, 384.2),
    ("Segformer3D", 4.51, 17.5),
]

SOFTMAX, LAYER_NORM, SILU, GELU, SOFTPLUS = 5, 8, 4, 8, 4
ROPE, UPSAMPLE = 3, 16


def linear_params(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def linear_flops(tokens: int, n_in: int, n_out: int, bias: bool = True) -> int:
    return 2 * tokens * n_in * n_out + (tokens * n_out if bias else 0)


def conv3d_params(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return c_out * c_in * k**3 + (c_out if bias else 0)


def conv3d_flops(out_voxels: int, c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return 2 * out_voxels * c_out * c_in * k**3 + (out_voxels * c_out if bias else 0)


def matmul_flops(m: int, k: int, p: int) -> int:
    return 2 * m * k * p


@dataclass
class Entry:
    name: str
    params: int
    flops: int = 0


@dataclass
class ComplexityReport:
    entries: list[Entry] = field(default_factory=list)
    extent: tuple[int, int, int] | None = None

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def __getitem__(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def params_under(self, prefix: str) -> int:
        return sum(e.params for e in self.entries if e.name == prefix or e.name.startswith(prefix + "."))

    def flops_under(self, prefix: str) -> int:
        return sum(e.flops for e in self.entries if e.name == prefix or e.name.startswith(prefix + "."))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("module,params,flops\n")
        for e in self.entries:
            buf.write(f"{e.name},{e.params},{e.flops}\n")
        buf.write(f"total,{self.total_params},{self.total_flops}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(e.name) for e in self.entries + [Entry("total", 0)])
        lines = [f"{'module':<{width}}  {'params':>12}  {'FLOPs':>18}"]
        for e in self.entries + [Entry("total", self.total_params, self.total_flops)]:
            lines.append(f"{e.name:<{width}}  {e.params:>12,d}  {e.flops:>18,d}")
        return "\n".join(lines)


# ---------------------------------------------------------------- per-block closed forms
def mamba_layer_counts(C: int, tokens: int, state_dim: int, expand: int, conv_width: int) -> tuple[int, int]:
    di, n, r = expand * C, state_dim, math.ceil(C / 16)
    params = (
        linear_params(C, 2 * di, bias=False)
        + di * conv_width + di
        + linear_params(di, r + 2 * n, bias=False)
        + linear_params(r, di)
        + di * n + di
        + linear_params(di, C, bias=False)
    )
    L = tokens
    flops = (
        linear_flops(L, C, 2 * di, bias=False)
        + 2 * conv_width * L * di + L * di
        + SILU * L * di
        + linear_flops(L, di, r + 2 * n, bias=False)
        + linear_flops(L, r, di)
        + SOFTPLUS * L * di
        + scan_flops(L, di, n)
        + SILU * L * di + L * di  # output gate
        + linear_flops(L, di, C, bias=False)
    )
    return params, flops


def scan_flops(L: int, channels: int, state_dim: int) -> int:
    state = 2 * 2 * L * channels * state_dim
    discretize = 4 * L * channels * state_dim
    skip = 2 * L * channels
    return state + discretize + skip


def mlp_counts(C: int, tokens: int, ratio: int) -> tuple[int, int]:
    hidden = C * ratio
    params = linear_params(C, hidden) + linear_params(hidden, C)
    flops = linear_flops(tokens, C, hidden) + GELU * tokens * hidden + linear_flops(tokens, hidden, C)
    return params, flops


def mamba_block_counts(C: int, tokens: int, cfg: ModelConfig) -> tuple[int, int]:
    L = tokens
    mp, mf = mamba_layer_counts(C, L, cfg.state_dim, cfg.expand, cfg.conv_width)
    fp, ff = mlp_counts(C, L, cfg.mlp_ratio)
    params = 2 * 2 * C + mp + 3 * linear_params(C, C) + fp
    flops = (
        2 * LAYER_NORM * L * C
        + mf
        + 3 * linear_flops(L, C, C)
        + 2 * SILU * L * C + L * C  # gate branches and their product
        + L * C  # residual
        + ff
        + L * C  # residual
    )
    return params, flops


def attention_score_flops(N: int, C: int, reduction: int) -> int:
    """QK^T plus attn @ V: ``2 * N * (N/r) * d_h * h`` each."""
    M = N // reduction
    return 2 * matmul_flops(N, C, M)


def attention_counts(C: int, heads: int, tokens: int, reduction: int, use_rope: bool) -> tuple[int, int]:
    N, r = tokens, reduction
    M = N // r
    params = 4 * linear_params(C, C) + linear_params(C * r, C)
    flops = (
        3 * linear_flops(N, C, C)
        + 2 * linear_flops(M, C * r, C)
        + (ROPE * (N + M) * C if use_rope else 0)
        + attention_score_flops(N, C, r)
        + heads * N * M  # 1/sqrt(d) scaling
        + SOFTMAX * heads * N * M
        + linear_flops(N, C, C)
    )
    return params, flops


def transformer_block_counts(C: int, heads: int, tokens: int, cfg: ModelConfig) -> tuple[int, int]:
    ap, af = attention_counts(C, heads, tokens, cfg.reduction, cfg.use_rope)
    fp, ff = mlp_counts(C, tokens, cfg.mlp_ratio)
    params = 2 * 2 * C + ap + fp
    flops = 2 * LAYER_NORM * tokens * C + af + ff + 2 * tokens * C
    return params, flops


# ---------------------------------------------------------------- whole model
def analyze(cfg: ModelConfig, extent=None) -> ComplexityReport:
    """Per-submodule parameter counts, and FLOPs when ``extent`` (int or 3-tuple) is given."""
    if extent is not None:
        extent = (extent,) * 3 if isinstance(extent, int) else tuple(extent)
        grids = cfg.stage_grids(extent)
        tokens = [math.prod(g) for g in grids]
        in_voxels = math.prod(extent)
    else:
        grids, tokens, in_voxels = [None] * 4, [0] * 4, 0
    report = ComplexityReport(extent=extent)
    add = report.entries.append
    chans = [cfg.in_channels] + [s.embed_dim for s in cfg.stages]

    for i, st in enumerate(cfg.stages):
        N, C = tokens[i], st.embed_dim
        embed_p = conv3d_params(chans[i], C, st.kernel) + 2 * C
        embed_f = conv3d_flops(N, chans[i], C, st.kernel) + LAYER_NORM * N * C
        if st.mixer == "mamba" and cfg.use_rope:
            embed_f += ROPE * N * C  # tokens are rotated once before the Mamba blocks
        add(Entry(f"stages.{i}.embed", embed_p, embed_f))
        for b in range(st.depth):
            if st.mixer == "mamba":
                p, f = mamba_block_counts(C, N, cfg)
            else:
                p, f = transformer_block_counts(C, st.heads, N, cfg)
            add(Entry(f"stages.{i}.blocks.{b}", p, f))

    Cd, K = cfg.decoder_dim, cfg.num_classes
    N1 = tokens[0]
    for i, st in enumerate(cfg.stages):
        f = linear_flops(tokens[i], st.embed_dim, Cd)
        if extent is not None and grids[i] != grids[0]:
            f += UPSAMPLE * N1 * Cd
        add(Entry(f"decoder.proj.{i}", linear_params(st.embed_dim, Cd), f))
    add(Entry("decoder.fuse", linear_params(4 * Cd, Cd), linear_flops(N1, 4 * Cd, Cd)))
    final_up = UPSAMPLE * in_voxels * K if cfg.stages[0].stride > 1 else 0
    add(Entry("decoder.head", linear_params(Cd, K), linear_flops(N1, Cd, K) + final_up))
    if cfg.deep_supervision:
        for j, st in enumerate(cfg.stages[1:]):
            add(Entry(f"decoder.ds_heads.{j}", linear_params(st.embed_dim, K), linear_flops(tokens[j + 1], st.embed_dim, K)))
    return report


def count_params(cfg: ModelConfig) -> ComplexityReport:
    return analyze(cfg)


def count_flops(cfg: ModelConfig, extent) -> ComplexityReport:
    return analyze(cfg, extent)


def all_attention_variant(cfg: ModelConfig) -> ModelConfig:
    """Same dims/depths/heads with every stage switched to self-attention."""
    return replace(cfg, stages=[replace(s, mixer="attention") for s in cfg.stages])


@dataclass
class ScalingRow:
    extent: int
    tokens: int
    mamba_stage_flops: int
    attention_stage_flops: int
    attention_score_flops: int


def _stage_flops(cfg: ModelConfig, stage: int, grid: tuple[int, int, int]) -> int:
    """Patch embedding plus blocks of one stage whose output grid is ``grid``."""
    st = cfg.stages[stage]
    c_in = cfg.in_channels if stage == 0 else cfg.stages[stage - 1].embed_dim
    N, C = math.prod(grid), st.embed_dim
    flops = conv3d_flops(N, c_in, C, st.kernel) + LAYER_NORM * N * C
    if st.mixer == "mamba":
        flops += (ROPE * N * C if cfg.use_rope else 0) + st.depth * mamba_block_counts(C, N, cfg)[1]
    else:
        flops += st.depth * transformer_block_counts(C, st.heads, N, cfg)[1]
    return flops


def scaling_report(cfg: ModelConfig, extents, stage: int = 0) -> list[ScalingRow]:
    """FLOPs of one stage under Mamba vs. hypothetical attention mixing at each cubic input extent.

    Only the grids up to ``stage`` have to be integral, so small extents that the
    deeper stages could not divide are still usable.
    """
    extents = list(extents)
    if len(extents) < 2:
        raise ValueError("scaling_report needs at least two extents")
    st = cfg.stages[stage]
    mamba_cfg = replace(cfg, stages=[replace(s, mixer="mamba") if i == stage else s for i, s in enumerate(cfg.stages)])
    attn_cfg = replace(cfg, stages=[replace(s, mixer="attention") if i == stage else s for i, s in enumerate(cfg.stages)])
    rows = []
    for e in extents:
        grid = (e, e, e)
        for s in cfg.stages[: stage + 1]:
            grid = conv3d_output_shape(grid, s.kernel, s.stride, s.padding)
        N = math.prod(grid)
        rows.append(
            ScalingRow(
                extent=e,
                tokens=N,
                mamba_stage_flops=_stage_flops(mamba_cfg, stage, grid),
                attention_stage_flops=_stage_flops(attn_cfg, stage, grid),
                attention_score_flops=st.depth * attention_score_flops(N, st.embed_dim, cfg.reduction),
            )
        )
    return rows


def format_scaling(rows: list[ScalingRow]) -> str:
    lines = [
        f"{'extent':>6} {'tokens':>8} {'mamba FLOPs':>16} {'x':>6} {'attention FLOPs':>18} {'x':>6} "
        f"{'score-term FLOPs':>18} {'x':>6}"
    ]
    prev = None
    for r in rows:
        def ratio(attr):
            return f"{getattr(r, attr) / getattr(prev, attr):6.2f}" if prev else f"{'':>6}"

        lines.append(
            f"{r.extent:>6} {r.tokens:>8} {r.mamba_stage_flops:>16,d} {ratio('mamba_stage_flops')} "
            f"{r.attention_stage_flops:>18,d} {ratio('attention_stage_flops')} "
            f"{r.attention_score_flops:>18,d} {ratio('attention_score_flops')}"
        )
        prev = r
    return "\n".join(lines)


def stage1_attention_flops(cfg: ModelConfig, extent: int) -> int:
    """FLOPs of stage 1 if its blocks used self-attention instead of Mamba."""
    attn_cfg = replace(cfg, stages=[replace(cfg.stages[0], mixer="attention")] + list(cfg.stages[1:]))
    return analyze(attn_cfg, extent).flops_under("stages.0")


def stage1_dominance(cfg: ModelConfig, extent: int) -> float:
    """Hypothetical stage-1 attention FLOPs divided by the full hybrid model's FLOPs."""
    return stage1_attention_flops(cfg, extent) / count_flops(cfg, extent).total_flops


def summary(cfg: ModelConfig, extent: int | None = None) -> str:
    """Human-readable totals next to the published reference figures."""
    params = count_params(cfg).total_params
    dev = (params / 1e6 - PUBLISHED_PARAMS_M) / PUBLISHED_PARAMS_M
    out = [
        f"total parameters: {params:,d} ({params / 1e6:.3f} M)",
        f"published reference: {PUBLISHED_PARAMS_M} M -> deviation {dev:+.1%} "
        f"({'within' if abs(dev) <= 0.20 else 'outside'} +/-20%)",
    ]
    if extent is not None:
        rep = count_flops(cfg, extent)
        g = rep.total_flops / 1e9
        gdev = (g - PUBLISHED_GFLOPS) / PUBLISHED_GFLOPS
        attn = count_flops(all_attention_variant(cfg), extent).total_flops / 1e9
        out += [
            f"FLOPs at {extent}^3 input: {g:.2f} GFLOPs (2 FLOPs per MAC)",
            f"published reference: {PUBLISHED_GFLOPS} GFLOPs (input resolution not stated; {extent}^3 assumed) "
            f"-> deviation {gdev:+.1%} ({'within' if abs(gdev) <= 0.35 else 'outside'} +/-35%)",
            f"all-attention variant at {extent}^3: {attn:.2f} GFLOPs ({attn / g:.1f}x the hybrid)",
            f"attention in stage 1 alone at {extent}^3: {stage1_attention_flops(cfg, extent) / 1e9:.2f} GFLOPs "
            f"({stage1_dominance(cfg, extent):.1f}x the whole hybrid)",
            "published comparison (params M / GFLOPs, not recomputed): "
            + ", ".join(f"{n} {p}/{f}" for n, p, f in PUBLISHED_COMPARISON),
        ]
    return "\n".join(out)
