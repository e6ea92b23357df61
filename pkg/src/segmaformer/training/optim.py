"""AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError, DivergenceError


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params) -> "AdamWState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float | list[float] = 0.0,
    names: list[str] | None = None,
) -> None:
    """Update ``params`` in place.

    Decay is applied on its own (``p -= lr * wd * p``) before the bias-corrected
    adaptive step. ``weight_decay`` may be given per parameter.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise DivergenceError(f"non-finite gradient in parameter {name}", state.step + 1)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    wds = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    for p, g, m, v, wd in zip(params, grads, state.m, state.v, wds):
        if wd:
            p -= lr * wd * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class AdamW:
    """Stateful wrapper binding :func:`adamw_step` to a module's parameters.

    Only matrices and kernels decay; biases, norm affines, ``A_log`` and ``D`` do not.
    """

    def __init__(self, named_params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.decay = [
            weight_decay if (p.ndim >= 2 and not n.endswith("A_log")) else 0.0 for n, p in named
        ]
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(
            [p.data for p in self.params], grads, self.state, self.lr if lr is None else lr,
            self.betas[0], self.betas[1], self.eps, self.decay, self.names,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, base_lr: float, min_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from ``min_lr`` to ``base_lr``, then cosine decay back to ``min_lr``."""
    if not 0 <= step <= total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return min_lr + (base_lr - min_lr) * step / warmup_steps
    # pin the end points; the closed form below rounds away from them
    if step == warmup_steps:
        return base_lr
    if step == total_steps:
        return min_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
