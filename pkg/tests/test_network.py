import json
import struct

import numpy as np
import pytest

from segmaformer.errors import CheckpointError, ConfigError
from segmaformer.network import (
    ModelConfig,
    SegMaFormer,
    StageConfig,
    decoder_forward,
    encoder_forward,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    tiny_config,
)
from segmaformer.tensor import Tensor, grad_check, no_grad
from segmaformer.training.losses import combined_loss

from conftest import t64


@pytest.fixture(scope="module")
def default_model():
    return SegMaFormer(ModelConfig(), seed=0)


def volume(rng, shape, dtype=np.float32):
    return Tensor(rng.normal(size=shape).astype(dtype))


# ---------------------------------------------------------------- config
def test_default_config_layout():
    cfg = ModelConfig()
    assert [s.mixer for s in cfg.stages] == ["mamba", "mamba", "attention", "attention"]
    assert [s.stride for s in cfg.stages] == [4, 2, 2, 2]
    assert [(s.kernel, s.padding) for s in cfg.stages] == [(7, 3), (3, 1), (3, 1), (3, 1)]
    assert not cfg.deep_supervision and cfg.ds_weights == [0.5, 0.25, 0.125]
    assert cfg.reduction == 1


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda d: d["stages"].pop(), "model.stages"),
        (lambda d: d["stages"][1].update(stride=1), "model.stages[1].stride"),
        (lambda d: d["stages"][2].update(heads=5), "model.stages[2].heads"),
        (lambda d: d["stages"][0].update(mixer="conv"), "model.stages[0].mixer"),
        (lambda d: d.update(num_classes=0), "model.num_classes"),
        (lambda d: d.update(extra=1), "model.extra"),
    ],
)
def test_invalid_configs_name_the_field(mutate, path):
    d = ModelConfig().to_dict()
    mutate(d)
    with pytest.raises(ConfigError) as exc:
        ModelConfig.from_dict(d)
    assert exc.value.path == path


def test_head_dim_not_divisible_by_six_is_rejected():
    stages = [StageConfig(32, 1, "mamba", 1, 7, 4, 3)] + [StageConfig(48, 1, "attention", 2)] * 3
    with pytest.raises(ConfigError, match="divisible by 6"):
        ModelConfig(stages=stages)


def test_config_dict_round_trip():
    cfg = tiny_config(deep_supervision=True)
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("extent,grids", [(32, [8, 4, 2, 1]), (64, [16, 8, 4, 2])])
def test_stage_grids(extent, grids):
    assert ModelConfig().stage_grids((extent,) * 3) == [(g,) * 3 for g in grids]


def test_non_integral_grid_names_the_stage():
    with pytest.raises(ConfigError) as exc:
        ModelConfig().stage_grids((48, 48, 48))
    assert exc.value.path == "model.stages[3]"


# ---------------------------------------------------------------- forward
def test_encoder_features_follow_config(default_model, rng):
    feats = encoder_forward(default_model, volume(rng, (1, 4, 32, 32, 32)))
    cfg = default_model.config
    assert [f.shape[1] for f in feats.features] == [s.embed_dim for s in cfg.stages]
    assert feats.grids == [(8,) * 3, (4,) * 3, (2,) * 3, (1,) * 3]


def test_forward_shapes(default_model, rng):
    out = default_model(volume(rng, (2, 4, 32, 32, 32)))
    assert out.logits.shape == (2, 4, 8, 8, 8)
    assert out.full.shape == (2, 4, 32, 32, 32)
    assert out.aux == [] and out.full.dtype == np.float32
    assert np.all(np.isfinite(out.full.data))


def test_deep_supervision_heads(rng):
    cfg = ModelConfig(deep_supervision=True)
    out = SegMaFormer(cfg)(volume(rng, (1, 4, 32, 32, 32)))
    assert [a.shape for a in out.aux] == [(1, 4, 4, 4, 4), (1, 4, 2, 2, 2), (1, 4, 1, 1, 1)]


def test_ds_off_adds_no_parameters():
    on = SegMaFormer(ModelConfig(deep_supervision=True))
    off = SegMaFormer(ModelConfig())
    extra = sum(s.embed_dim * 4 + 4 for s in ModelConfig().stages[1:])
    assert on.num_params() - off.num_params() == extra


def test_forward_is_deterministic(rng):
    x = volume(rng, (1, 4, 32, 32, 32))
    a = SegMaFormer(ModelConfig(), seed=3)(x).full.data
    b = SegMaFormer(ModelConfig(), seed=3)(x).full.data
    assert a.tobytes() == b.tobytes()


def test_wrong_input_channels(default_model, rng):
    with pytest.raises(ConfigError):
        default_model(volume(rng, (1, 3, 32, 32, 32)))


def test_zero_head_gives_zero_logits(rng):
    model = SegMaFormer(tiny_config(num_classes=1), dtype=np.float64)
    model.decoder.head.weight.data[:] = 0.0
    model.decoder.head.bias.data[:] = 0.0
    out = model(t64(rng.normal(size=(1, 1, 16, 16, 16))))
    assert out.full.shape == (1, 1, 16, 16, 16)
    np.testing.assert_array_equal(out.full.data, 0.0)


def test_decoder_matches_manual_fusion(rng):
    from segmaformer.tensor import upsample_trilinear

    model = SegMaFormer(tiny_config(), dtype=np.float64)
    feats = encoder_forward(model, t64(rng.normal(size=(1, 1, 16, 16, 16))))
    dec = model.decoder
    ups = []
    for i, (x, proj) in enumerate(zip(feats.features, dec.proj)):
        v = np.einsum("bcdhw,co->bodhw", x.data, proj.weight.data) + proj.bias.data[:, None, None, None]
        ups.append(upsample_trilinear(t64(v), 2**i).data if i else v)
    z = np.einsum("bcdhw,co->bodhw", np.concatenate(ups, 1), dec.fuse.weight.data)
    z += dec.fuse.bias.data[:, None, None, None]
    y = np.einsum("bcdhw,co->bodhw", z, dec.head.weight.data) + dec.head.bias.data[:, None, None, None]
    out = decoder_forward(model, feats)
    np.testing.assert_allclose(out.logits.data, y, atol=1e-12)
    np.testing.assert_allclose(out.full.data, upsample_trilinear(t64(y), 2).data, atol=1e-12)


def test_zeroed_block_outputs_reduce_to_embedding_only_model(rng):
    full = SegMaFormer(tiny_config(), seed=5, dtype=np.float64)
    for name, p in full.named_parameters():
        if name.endswith(("w_p.weight", "w_p.bias", "attn.proj.weight", "attn.proj.bias",
                          "mlp.fc2.weight", "mlp.fc2.bias")):
            p.data[:] = 0.0
    shallow_cfg = tiny_config()
    for s in shallow_cfg.stages:
        s.depth = 0
    shallow = SegMaFormer(shallow_cfg, seed=9, dtype=np.float64)
    params = dict(full.named_parameters())
    for name, p in shallow.named_parameters():
        p.data = params[name].data.copy()
    x = t64(rng.normal(size=(1, 1, 16, 16, 16)))
    with no_grad():
        assert full(x).full.data.tobytes() == shallow(x).full.data.tobytes()


def test_end_to_end_gradient_tiny_config(rng):
    model = SegMaFormer(tiny_config(), seed=1, dtype=np.float64)
    x = t64(rng.normal(size=(1, 1, 16, 16, 16)))
    labels = rng.integers(0, 2, size=(1, 16, 16, 16))
    params = model.parameters()
    rep = grad_check(lambda v, *ps: combined_loss(model(v).full, labels), [x, *params], max_coords=80, rng=rng)
    assert rep.max_rel_err <= 1e-4


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_is_exact(tmp_path, rng):
    model = SegMaFormer(tiny_config(), seed=2)
    x = volume(rng, (1, 1, 16, 16, 16))
    save_checkpoint(model, tmp_path / "m.smfc", meta={"step": 7})
    loaded, meta = load_checkpoint(tmp_path / "m.smfc")
    assert meta == {"step": 7}
    assert loaded.config == model.config
    with no_grad():
        assert loaded(x).full.data.tobytes() == model(x).full.data.tobytes()


def test_checkpoint_layout(tmp_path):
    model = SegMaFormer(tiny_config(), seed=2)
    path = tmp_path / "m.smfc"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SMFC"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    hlen = struct.unpack_from("<I", raw, 8)[0]
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    assert header["config"] == model.config.to_dict()
    names = [n for n, _ in model.named_parameters()]
    assert [n for n, _ in read_checkpoint(path)[2]] == names


def test_checkpoint_size_follows_parameter_count(tmp_path, default_model):
    path = tmp_path / "d.smfc"
    save_checkpoint(default_model, path)
    params = list(default_model.named_parameters())
    header = len(json.dumps({"config": default_model.config.to_dict(), "meta": {}}, sort_keys=True).encode())
    per_param = sum(4 + len(n.encode()) + 4 + 4 * p.ndim for n, p in params)
    expected = default_model.num_params() * 4 + 4 + 4 + 4 + header + 4 + per_param
    assert path.stat().st_size == expected
    assert expected - default_model.num_params() * 4 < 0.01 * expected


def test_checkpoint_mismatch_names_first_parameter(tmp_path):
    save_checkpoint(SegMaFormer(tiny_config()), tmp_path / "m.smfc")
    other = SegMaFormer(tiny_config(decoder_dim=12))
    with pytest.raises(CheckpointError, match="parameter decoder.proj.0.weight"):
        load_checkpoint(tmp_path / "m.smfc", other)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.smfc").write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.smfc")


def test_checkpoint_bad_version(tmp_path):
    save_checkpoint(SegMaFormer(tiny_config()), tmp_path / "m.smfc")
    raw = bytearray((tmp_path / "m.smfc").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "m.smfc").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "m.smfc")
