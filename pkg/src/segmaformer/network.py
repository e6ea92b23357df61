"""Four-stage hybrid Mamba/attention encoder, all-MLP decoder, and checkpoint I/O."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .attention import TransformerBlock
from .embedding import PatchEmbed, PatchEmbedConfig, grid_coords, rope_tokens, tokens_from_volume, volume_from_tokens
from .errors import CheckpointError, ConfigError
from .nn import Linear, Module
from .ssm import MambaBlock
from .tensor import Tensor, concat, conv3d_output_shape, upsample_trilinear

MIXERS = ("mamba", "attention")


@dataclass
class StageConfig:
    embed_dim: int
    depth: int = 2
    mixer: str = "mamba"
    heads: int = 1
    kernel: int = 3
    stride: int = 2
    padding: int = 1


def _default_stages() -> list[StageConfig]:
    return [
        StageConfig(24, 2, "mamba", 1, 7, 4, 3),
        StageConfig(48, 2, "mamba", 2, 3, 2, 1),
        StageConfig(96, 2, "attention", 4, 3, 2, 1),
        StageConfig(192, 2, "attention", 8, 3, 2, 1),
    ]


@dataclass
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 4
    stages: list[StageConfig] = field(default_factory=_default_stages)
    decoder_dim: int = 192
    mlp_ratio: int = 4
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    reduction: int = 1
    use_rope: bool = True
    rope_base: float = 10000.0
    deep_supervision: bool = False
    ds_weights: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.125])

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.validate()

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ConfigError(f"expected exactly 4 stages, got {len(self.stages)}", "model.stages")
        for name in ("in_channels", "num_classes", "decoder_dim", "mlp_ratio", "state_dim", "expand", "conv_width",
                     "reduction"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"model.{name}")
        for i, st in enumerate(self.stages):
            path = f"model.stages[{i}]"
            if st.mixer not in MIXERS:
                raise ConfigError(f"unknown mixer {st.mixer!r}", f"{path}.mixer")
            if st.stride < 2:
                raise ConfigError("every stage must downsample (stride > 1)", f"{path}.stride")
            if st.kernel < st.stride:
                raise ConfigError("kernel must be >= stride (overlapping patches)", f"{path}.kernel")
            if st.depth < 0 or st.embed_dim < 1 or st.heads < 1:
                raise ConfigError("depth, embed_dim and heads must be positive", path)
            if st.embed_dim % st.heads:
                raise ConfigError(f"embed_dim {st.embed_dim} not divisible by heads {st.heads}", f"{path}.heads")
            if self.use_rope and (st.embed_dim // st.heads) % 6:
                raise ConfigError(
                    f"head_dim {st.embed_dim // st.heads} not divisible by 6 (3D rotary embedding)", f"{path}.heads"
                )
        if self.deep_supervision and len(self.ds_weights) != 3:
            raise ConfigError("deep supervision needs 3 weights (stages 2-4)", "model.ds_weights")

    def stage_grids(self, extent) -> list[tuple[int, int, int]]:
        """Token grid of every stage; raises when a stage would not divide its input evenly."""
        extent = tuple(int(e) for e in extent)
        grids = []
        for i, st in enumerate(self.stages):
            out = conv3d_output_shape(extent, st.kernel, st.stride, st.padding)
            if any(o * st.stride != e for o, e in zip(out, extent)):
                raise ConfigError(
                    f"input extent {extent} is not divisible by stride {st.stride}", f"model.stages[{i}]"
                )
            grids.append(out)
            extent = out
        return grids

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any], path: str = "model") -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError("unknown key", f"{path}.{key}")
        stages = d.get("stages")
        if stages is not None:
            stage_keys = {f.name for f in fields(StageConfig)}
            for i, s in enumerate(stages):
                for key in s:
                    if key not in stage_keys:
                        raise ConfigError("unknown key", f"{path}.stages[{i}].{key}")
        return cls(**d)


def tiny_config(in_channels: int = 1, num_classes: int = 2, **kw) -> ModelConfig:
    """Small configuration for finite-difference checks on 16^3 inputs."""
    stages = [
        StageConfig(6, 1, "mamba", 1, 3, 2, 1),
        StageConfig(6, 1, "mamba", 1, 3, 2, 1),
        StageConfig(12, 1, "attention", 2, 3, 2, 1),
        StageConfig(12, 1, "attention", 1, 3, 2, 1),
    ]
    kw.setdefault("decoder_dim", 6)
    kw.setdefault("state_dim", 4)
    kw.setdefault("mlp_ratio", 2)
    return ModelConfig(in_channels=in_channels, num_classes=num_classes, stages=stages, **kw)


@dataclass
class StageFeatures:
    features: list[Tensor]  # X1..X4, each [B, Ci, Di, Hi, Wi]

    @property
    def grids(self) -> list[tuple[int, ...]]:
        return [tuple(f.shape[2:]) for f in self.features]


@dataclass
class SegmentationOutput:
    logits: Tensor  # stage-1 resolution
    full: Tensor  # input resolution
    aux: list[Tensor] = field(default_factory=list)  # deep-supervision logits at stages 2-4


class Stage(Module):
    def __init__(self, cfg: StageConfig, in_channels: int, model: ModelConfig, rng, dtype):
        self.cfg = cfg
        self.use_rope = model.use_rope
        self.rope_base = model.rope_base
        self.embed = PatchEmbed(
            PatchEmbedConfig(in_channels, cfg.embed_dim, cfg.kernel, cfg.stride, cfg.padding), rng, dtype=dtype
        )
        if cfg.mixer == "mamba":
            self.blocks = [
                MambaBlock(cfg.embed_dim, rng, model.mlp_ratio, model.state_dim, model.expand, model.conv_width,
                           dtype=dtype)
                for _ in range(cfg.depth)
            ]
        else:
            self.blocks = [
                TransformerBlock(cfg.embed_dim, cfg.heads, rng, model.mlp_ratio, model.reduction,
                                 use_rope=model.use_rope, dtype=dtype)
                for _ in range(cfg.depth)
            ]

    def forward(self, x: Tensor) -> Tensor:
        tg = self.embed(x)
        coords = tg.coords()
        tokens = tg.tokens
        if self.cfg.mixer == "mamba":
            if self.use_rope:
                tokens = rope_tokens(tokens, coords, self.cfg.heads, self.rope_base)
            for blk in self.blocks:
                tokens = blk.forward_tokens(tokens)
        else:
            for blk in self.blocks:
                tokens = blk.forward_tokens(tokens, coords)
        return volume_from_tokens(tokens, tg.grid)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        c = cfg.decoder_dim
        self.proj = [Linear(st.embed_dim, c, rng, dtype=dtype) for st in cfg.stages]
        self.fuse = Linear(4 * c, c, rng, dtype=dtype)
        self.head = Linear(c, cfg.num_classes, rng, dtype=dtype)
        self.ds_heads = (
            [Linear(st.embed_dim, cfg.num_classes, rng, dtype=dtype) for st in cfg.stages[1:]]
            if cfg.deep_supervision
            else []
        )

    def forward(self, feats: StageFeatures, out_scale) -> SegmentationOutput:
        grid1 = feats.grids[0]
        ups = []
        for x, proj in zip(feats.features, self.proj):
            grid = x.shape[2:]
            scale = []
            for a, b in zip(grid1, grid):
                if a % b:
                    raise ConfigError(f"stage grid {tuple(grid)} does not divide stage-1 grid {grid1}")
                scale.append(a // b)
            v = volume_from_tokens(proj(tokens_from_volume(x)), grid)
            ups.append(upsample_trilinear(v, tuple(scale)) if any(s > 1 for s in scale) else v)
            if tuple(ups[-1].shape[2:]) != tuple(grid1):
                raise ConfigError(f"upsampled grid {ups[-1].shape[2:]} != stage-1 grid {grid1}")
        fused = self.fuse(tokens_from_volume(concat(ups, axis=1)))
        logits = volume_from_tokens(self.head(fused), grid1)
        full = upsample_trilinear(logits, out_scale)
        aux = [
            volume_from_tokens(head(tokens_from_volume(x)), x.shape[2:])
            for head, x in zip(self.ds_heads, feats.features[1:])
        ]
        return SegmentationOutput(logits, full, aux)


class SegMaFormer(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        chans = [self.config.in_channels] + [s.embed_dim for s in self.config.stages]
        self.stages = [Stage(st, chans[i], self.config, rng, self.dtype) for i, st in enumerate(self.config.stages)]
        self.decoder = Decoder(self.config, rng, self.dtype)

    def encode(self, volume: Tensor) -> StageFeatures:
        if volume.ndim != 5 or volume.shape[1] != self.config.in_channels:
            raise ConfigError(
                f"expected input [B, {self.config.in_channels}, D, H, W], got {volume.shape}", "model.in_channels"
            )
        self.config.stage_grids(volume.shape[2:])
        feats, x = [], volume
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return StageFeatures(feats)

    def decode(self, feats: StageFeatures) -> SegmentationOutput:
        return self.decoder(feats, self.config.stages[0].stride)

    def forward(self, volume: Tensor) -> SegmentationOutput:
        return self.decode(self.encode(volume))


def encoder_forward(model: SegMaFormer, volume: Tensor) -> StageFeatures:
    return model.encode(volume)


def decoder_forward(model: SegMaFormer, feats: StageFeatures) -> SegmentationOutput:
    return model.decode(feats)


# ---------------------------------------------------------------- checkpoints
MAGIC = b"SMFC"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(model: SegMaFormer, path, meta: dict | None = None) -> None:
    """Little-endian binary: magic, version, JSON header, then named f32 parameter arrays."""
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True)
    params = list(model.named_parameters())
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(header), struct.pack("<I", len(params))]
    for name, p in params:
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_checkpoint(path) -> tuple[dict, dict, list[tuple[str, np.ndarray]]]:
    """Return ``(config dict, meta dict, [(name, f32 array), ...])``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(r.string())
    arrays = []
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        arrays.append((name, arr))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return header["config"], header.get("meta", {}), arrays


def load_into(model: SegMaFormer, arrays: list[tuple[str, np.ndarray]]) -> None:
    params = list(model.named_parameters())
    for (name, p), (stored, arr) in zip(params, arrays):
        if name != stored or p.shape != arr.shape:
            raise CheckpointError(f"mismatched parameter {name}: stored {stored}{arr.shape} vs model {p.shape}")
    if len(params) != len(arrays):
        extra = params[len(arrays)][0] if len(params) > len(arrays) else arrays[len(params)][0]
        raise CheckpointError(f"mismatched parameter {extra}: {len(arrays)} stored vs {len(params)} in model")
    for (_, p), (_, arr) in zip(params, arrays):
        p.data = arr.astype(p.dtype)
        p.grad = None


def load_checkpoint(path, model: SegMaFormer | None = None, dtype=np.float32) -> tuple[SegMaFormer, dict]:
    """Load parameters; builds the model from the stored config unless one is given."""
    cfg, meta, arrays = read_checkpoint(path)
    if model is None:
        model = SegMaFormer(ModelConfig.from_dict(cfg), dtype=dtype)
    load_into(model, arrays)
    return model, meta
