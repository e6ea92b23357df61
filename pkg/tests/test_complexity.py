import math

import numpy as np
import pytest

from segmaformer import attention as attention_mod
from segmaformer.attention import MultiHeadAttention
from segmaformer.complexity import (
    all_attention_variant,
    attention_counts,
    attention_score_flops,
    conv3d_params,
    count_flops,
    count_params,
    format_scaling,
    linear_params,
    mamba_block_counts,
    scaling_report,
    scan_flops,
    stage1_dominance,
    summary,
    transformer_block_counts,
)
from segmaformer.embedding import grid_coords
from segmaformer.network import ModelConfig, SegMaFormer, tiny_config
from segmaformer.ssm import MambaBlock
from segmaformer.tensor import no_grad

from conftest import t64


def test_layer_parameter_formulas():
    assert linear_params(4, 8) == 40
    assert conv3d_params(1, 2, 3) == 56


def test_attention_block_hand_count():
    # N=2, C=6, one head, r=1, rotary on
    qkv = 3 * (2 * 2 * 6 * 6 + 2 * 6)
    reduce = 2 * (2 * 2 * 6 * 6 + 2 * 6)
    rope = 3 * (2 + 2) * 6
    scores = 2 * (2 * 2 * 6 * 2)
    scale_softmax = 2 * 2 + 5 * 2 * 2
    proj = 2 * 2 * 6 * 6 + 2 * 6
    assert attention_counts(6, 1, 2, 1, True) == (4 * 42 + 42, qkv + reduce + rope + scores + scale_softmax + proj)


def test_attention_module_params_match_formula(rng):
    for C, h, r in [(6, 1, 1), (12, 2, 2), (24, 4, 1)]:
        mha = MultiHeadAttention(C, h, rng, reduction=r)
        assert sum(p.size for p in mha.parameters()) == attention_counts(C, h, 8, r, True)[0]


def test_scan_flop_convention():
    assert scan_flops(10, 3, 4) == 4 * 120 + 4 * 120 + 2 * 30


@pytest.mark.parametrize("C", [24, 48])
def test_block_params_match_modules(rng, C):
    cfg = ModelConfig()
    assert mamba_block_counts(C, 8, cfg)[0] == sum(p.size for p in MambaBlock(C, rng).parameters())


def test_enumeration_matches_model_parameters():
    for cfg in (ModelConfig(), ModelConfig(deep_supervision=True), tiny_config()):
        model = SegMaFormer(cfg)
        report = count_params(cfg)
        assert report.total_params == model.num_params()
        for entry in report.entries:
            actual = sum(p.size for n, p in model.named_parameters() if n.startswith(entry.name + "."))
            assert actual == entry.params, entry.name


def test_default_total_near_published():
    total = count_params(ModelConfig()).total_params
    assert abs(total / 2.02e6 - 1) <= 0.20


def test_mamba_block_flops_linear_in_length():
    cfg = ModelConfig()
    for L in (64, 512, 4096):
        assert mamba_block_counts(24, 2 * L, cfg)[1] == 2 * mamba_block_counts(24, L, cfg)[1]


def test_attention_block_flops_superlinear():
    cfg = ModelConfig()
    for N in (4096, 32768):
        ratio = transformer_block_counts(24, 1, 2 * N, cfg)[1] / transformer_block_counts(24, 1, N, cfg)[1]
        assert ratio >= 3.2


def test_scaling_ratios():
    rows = scaling_report(ModelConfig(), [16, 32, 64])
    assert [r.tokens for r in rows] == [64, 512, 4096]
    for a, b in zip(rows, rows[1:]):
        assert b.mamba_stage_flops / a.mamba_stage_flops == 8.0
        assert b.attention_score_flops / a.attention_score_flops == 64.0
    text = format_scaling(rows)
    assert "8.00" in text and "64.00" in text


def test_scaling_needs_two_extents():
    with pytest.raises(ValueError):
        scaling_report(ModelConfig(), [32])


def test_hybrid_cheaper_than_all_attention():
    cfg = ModelConfig()
    hybrid = count_flops(cfg, 64).total_flops
    assert hybrid < count_flops(all_attention_variant(cfg), 64).total_flops
    assert stage1_dominance(cfg, 128) > 1.0


def test_default_flops_within_band():
    gflops = count_flops(ModelConfig(), 128).total_flops / 1e9
    assert abs(gflops / 15.2 - 1) <= 0.35


def test_deep_supervision_off_costs_nothing():
    on = count_flops(ModelConfig(deep_supervision=True), 32)
    off = count_flops(ModelConfig(), 32)
    assert off.params_under("decoder.ds_heads") == 0 and off.flops_under("decoder.ds_heads") == 0
    assert on.params_under("decoder.ds_heads") > 0
    assert on.total_flops - off.total_flops == on.flops_under("decoder.ds_heads")


def test_csv_format():
    report = count_flops(tiny_config(), 16)
    lines = report.to_csv().splitlines()
    assert lines[0] == "module,params,flops"
    assert lines[-1] == f"total,{report.total_params},{report.total_flops}"
    assert len(lines) == len(report.entries) + 2
    assert all(len(l.split(",")) == 3 for l in lines)


def test_summary_mentions_published_figures():
    text = summary(ModelConfig(), 128)
    assert "2.02" in text and "15.2" in text


# ---------------------------------------------------------------- dual route: instrumented score products
@pytest.mark.parametrize("heads,C,r,grid", [(1, 6, 1, (2, 2, 2)), (2, 12, 2, (2, 4, 4))])
def test_instrumented_score_flops_match_closed_form(monkeypatch, rng, heads, C, r, grid):
    counted = []
    real = attention_mod.matmul

    def counting(a, b):
        *batch, m, k = a.shape
        p = b.shape[-1]
        counted.append(2 * math.prod(batch) * m * k * p)
        return real(a, b)

    monkeypatch.setattr(attention_mod, "matmul", counting)
    mha = MultiHeadAttention(C, heads, rng, reduction=r, dtype=np.float64)
    N = math.prod(grid)
    with no_grad():
        mha(t64(rng.normal(size=(1, N, C))), grid_coords(grid))
    assert sum(counted) == attention_score_flops(N, C, r)
