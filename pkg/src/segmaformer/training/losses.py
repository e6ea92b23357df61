"""Segmentation losses and overlap metrics."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DataError
from ..tensor import Tensor, log_softmax, softmax


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[B, *S]`` integer labels -> ``[B, K, *S]`` indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]")
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels.astype(np.int64)], -1, 1)


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss, ``1 - mean_k (2 sum p t + eps) / (sum p + sum t + eps)``.

    Sums run over the batch and all voxels jointly, so the value does not depend on
    the order of the batch.
    """
    K = logits.shape[1]
    t = one_hot(labels, K, logits.dtype)
    p = softmax(logits, axis=1)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxel-wise cross-entropy of ``[B, K, ...]`` logits."""
    K = logits.shape[1]
    t = one_hot(labels, K, logits.dtype)
    count = t.size // K
    return (log_softmax(logits, axis=1) * t).sum() * (-1.0 / count)


def downsample_labels(labels: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour label downsampling to ``grid``, sampling each cell's centre voxel."""
    out = labels
    for ax, g in enumerate(grid):
        n = labels.shape[ax + 1]
        f = n // g
        if f * g != n:
            raise DataError(f"label extent {n} is not a multiple of grid extent {g}")
        idx = np.arange(g) * f + f // 2
        out = np.take(out, idx, axis=ax + 1)
    return out


def combined_loss(
    logits: Tensor,
    labels: np.ndarray,
    dice_weight: float = 1.0,
    ce_weight: float = 1.0,
    aux_logits: Sequence[Tensor] = (),
    aux_weights: Sequence[float] = (),
    smooth: float = 1e-5,
) -> Tensor:
    """``dice_weight * dice + ce_weight * CE`` plus weighted auxiliary (deep supervision) terms."""

    def term(lg: Tensor, lb: np.ndarray) -> Tensor:
        parts = []
        if dice_weight:
            parts.append(dice_loss(lg, lb, smooth) * dice_weight)
        if ce_weight:
            parts.append(cross_entropy(lg, lb) * ce_weight)
        if not parts:
            raise DataError("dice_weight and ce_weight are both zero")
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    loss = term(logits, labels)
    for lg, w in zip(aux_logits, aux_weights):
        loss = loss + term(lg, downsample_labels(labels, lg.shape[2:])) * w
    return loss


def dice_score(pred: np.ndarray, target: np.ndarray, k: int) -> float:
    """Hard Dice of class ``k``; 1.0 when the class is absent from both masks."""
    a = np.asarray(pred) == k
    b = np.asarray(target) == k
    return _mask_dice(a, b)


def region_dice(pred: np.ndarray, target: np.ndarray, k: int) -> float:
    """Hard Dice of the nested region ``label >= k`` (the WT/TC/ET convention)."""
    return _mask_dice(np.asarray(pred) >= k, np.asarray(target) >= k)


def _mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)
