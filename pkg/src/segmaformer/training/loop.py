"""Training and evaluation loops over synthetic phantoms."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..errors import ConfigError, DivergenceError, NumericError
from ..network import SegMaFormer, load_checkpoint, save_checkpoint
from ..tensor import Tensor, backward, no_grad
from .data import SyntheticDataSpec, generate_synthetic, make_batch
from .losses import combined_loss, region_dice
from .optim import AdamW, AdamWState, lr_at

log = logging.getLogger(__name__)

HELD_OUT_OFFSET = 1_000_000
CHECKPOINT_NAME = "checkpoint.smfc"
OPTIMIZER_NAME = "optimizer.npz"
METRICS_NAME = "metrics.csv"


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    min_lr: float = 1e-6
    warmup_steps: int | None = None  # None: 5% of total_steps
    total_steps: int = 2000
    batch_size: int = 2
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    train_size: int = 64
    eval_size: int = 16
    eval_every: int = 250

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(0.05 * self.total_steps)
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("must be >= 1", "train.total_steps")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps", "train.warmup_steps")
        if self.dice_weight < 0 or self.ce_weight < 0 or (self.dice_weight == 0 and self.ce_weight == 0):
            raise ConfigError("loss weights must be >= 0 and not both zero", "train.dice_weight")
        if self.batch_size < 1 or self.train_size < self.batch_size:
            raise ConfigError("need 1 <= batch_size <= train_size", "train.batch_size")
        if self.eval_every < 1 or self.eval_size < 0:
            raise ConfigError("eval_every must be >= 1 and eval_size >= 0", "train.eval_every")
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError("need 0 < min_lr <= base_lr", "train.min_lr")

    def lr(self, step: int) -> float:
        return lr_at(step, self.base_lr, self.min_lr, self.warmup_steps, self.total_steps)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any], path: str = "train") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError("unknown key", f"{path}.{key}")
        return cls(**d)


def metrics_header(num_classes: int) -> list[str]:
    return ["step", "lr", "loss"] + [f"dice_c{k}" for k in range(1, num_classes)]


def write_metrics_csv(path, history: list[dict], num_classes: int) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = metrics_header(num_classes)
    writer.writerow(header)
    for row in history:
        writer.writerow([row["step"]] + [repr(float(row[h])) for h in header[1:]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def predict(model: SegMaFormer, volumes: np.ndarray, batch_size: int = 2) -> np.ndarray:
    """Argmax labels at input resolution."""
    preds = []
    with no_grad():
        for i in range(0, len(volumes), batch_size):
            out = model(Tensor(volumes[i : i + batch_size].astype(model.dtype)))
            preds.append(out.full.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(preds)


def evaluate(model: SegMaFormer, volumes: np.ndarray, labels: np.ndarray, batch_size: int = 2) -> dict[int, float]:
    """Mean hard Dice per foreground class over the volumes.

    Class ``k`` is scored on the nested region ``label >= k``, the convention for
    hierarchical tumour labels that the phantoms mimic.
    """
    pred = predict(model, volumes, batch_size)
    K = model.config.num_classes
    return {
        k: float(np.mean([region_dice(p, t, k) for p, t in zip(pred, labels)])) for k in range(1, K)
    }


def held_out_set(spec: SyntheticDataSpec, size: int) -> tuple[np.ndarray, np.ndarray]:
    return make_batch(spec, range(HELD_OUT_OFFSET, HELD_OUT_OFFSET + size))


def _save_optimizer(path, state: AdamWState) -> None:
    arrays = {f"m{i}": m for i, m in enumerate(state.m)} | {f"v{i}": v for i, v in enumerate(state.v)}
    with open(path, "wb") as fh:
        np.savez(fh, step=np.int64(state.step), **arrays)


def _load_optimizer(path, state: AdamWState) -> None:
    with np.load(path) as z:
        state.step = int(z["step"])
        for i in range(len(state.m)):
            state.m[i][...] = z[f"m{i}"]
            state.v[i][...] = z[f"v{i}"]


def train(
    model: SegMaFormer,
    cfg: TrainConfig,
    data: SyntheticDataSpec,
    out_dir=None,
    resume: bool = False,
    on_step: Callable[[int, float, float], None] | None = None,
) -> list[dict]:
    """Run ``cfg.total_steps`` AdamW updates; return the evaluation history.

    Each history row holds the 0-based index of the update just taken, the learning
    rate it used, its loss and the held-out Dice per foreground class. With
    ``out_dir`` the loop keeps ``metrics.csv``, the checkpoint and optimizer state
    current at every evaluation, and ``resume`` picks up from them.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = AdamW(model.named_parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    start = 0
    if resume:
        if out is None:
            raise ConfigError("resume needs an output directory", "paths.out")
        _, meta = load_checkpoint(out / CHECKPOINT_NAME, model)
        _load_optimizer(out / OPTIMIZER_NAME, opt.state)
        start = int(meta["step"])
        if (out / METRICS_NAME).exists():
            history = read_metrics_csv(out / METRICS_NAME)

    train_x, train_y = make_batch(data, range(cfg.train_size))
    train_x = train_x.astype(model.dtype)
    eval_x, eval_y = held_out_set(data, cfg.eval_size) if cfg.eval_size else (None, None)
    K = model.config.num_classes
    ds = model.config.deep_supervision

    def batch_indices(step: int) -> np.ndarray:
        per_epoch = cfg.train_size // cfg.batch_size
        epoch, pos = divmod(step, per_epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(cfg.train_size)
        return order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]

    for step in range(start, cfg.total_steps):
        lr = cfg.lr(step)
        idx = batch_indices(step)
        try:
            result = model(Tensor(train_x[idx]))
            loss = combined_loss(
                result.full, train_y[idx], cfg.dice_weight, cfg.ce_weight,
                aux_logits=result.aux if ds else (), aux_weights=model.config.ds_weights if ds else (),
            )
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value}", step)
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
        except NumericError as exc:
            # non-finite parameters also surface as domain failures inside the forward pass
            if out is not None:
                (out / "divergence.json").write_text(json.dumps({"step": step, "error": str(exc)}) + "\n")
            if isinstance(exc, DivergenceError):
                raise
            raise DivergenceError(str(exc), step) from exc
        if on_step:
            on_step(step, lr, value)

        if (step + 1) % cfg.eval_every == 0 or step == cfg.total_steps - 1:
            row = {"step": step, "lr": lr, "loss": value}
            if eval_x is not None:
                dice = evaluate(model, eval_x, eval_y, cfg.batch_size)
            else:
                dice = {k: float("nan") for k in range(1, K)}
            row.update({f"dice_c{k}": v for k, v in dice.items()})
            history.append(row)
            log.info("step %d lr %.3e loss %.4f dice %s", step, lr, value,
                     " ".join(f"{v:.3f}" for v in dice.values()))
            if out is not None:
                write_metrics_csv(out / METRICS_NAME, history, K)
                save_checkpoint(model, out / CHECKPOINT_NAME, meta={"step": step + 1})
                _save_optimizer(out / OPTIMIZER_NAME, opt.state)
    return history
