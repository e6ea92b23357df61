"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"rel={self.max_rel_err:.3e} abs={self.max_abs_err:.3e} coords={self.n_coords} [{status}]"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of the scalar ``f(*inputs)``.

    The relative error is ``max|analytic - numeric| / max(|analytic|, |numeric|)`` with
    both maxima taken over every checked coordinate, so a gradient that is zero
    everywhere yields 0 only when both routes agree exactly. ``f`` may ignore its
    arguments and close over the tensors instead (handy for module parameters);
    they are perturbed in place. ``max_coords`` caps the number of coordinates
    sampled for the numeric route.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    saved_flags = [x.requires_grad for x in xs]
    for x in xs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    out = f(*xs)
    backward(out)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    coords = [(i, j) for i, x in enumerate(xs) for j in range(x.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    a_vals, n_vals = [], []
    with no_grad():
        for i, j in coords:
            flat = xs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(*xs).data.sum())
            flat[j] = orig - h
            fm = float(f(*xs).data.sum())
            flat[j] = orig
            n_vals.append((fp - fm) / (2 * h))
            a_vals.append(float(analytic[i].reshape(-1)[j]))

    for x, flag in zip(xs, saved_flags):
        x.requires_grad = flag
        x.grad = None
    a = np.asarray(a_vals)
    n = np.asarray(n_vals)
    abs_err = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale = float(max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0)))
    rel = abs_err / scale if scale > 0 else abs_err
    return GradCheckReport(max_rel_err=rel, max_abs_err=abs_err, tol=tol, n_coords=len(coords))
