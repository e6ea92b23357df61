"""Losses, optimizer, schedule, synthetic data and the training loop."""
from .data import Ellipsoid, SyntheticDataSpec, generate_synthetic, make_batch, phantom_geometry
from .loop import TrainConfig, evaluate, predict, read_metrics_csv, train, write_metrics_csv
from .losses import combined_loss, cross_entropy, dice_loss, dice_score, downsample_labels, one_hot, region_dice
from .optim import AdamW, AdamWState, adamw_step, lr_at

__all__ = [name for name in dir() if not name.startswith("_")]
