"""Seeded synthetic phantoms: nested ellipsoids in a noisy multi-channel volume."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from ..errors import ConfigError

# Per-class intensity of each of the four default channels; rows are classes 0..3.
_DEFAULT_INTENSITY = np.array(
    [
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 0.4, 0.7, 0.3],
        [0.5, 1.0, 0.2, 0.8],
        [0.2, 0.6, 1.1, 1.3],
    ]
)


@dataclass
class SyntheticDataSpec:
    extent: int = 32
    num_classes: int = 4
    channels: int = 4
    noise: float = 0.1
    # semi-axis range (lo, hi) of each foreground class, outermost first
    radii: list[list[float]] = field(default_factory=lambda: [[9.0, 12.0], [6.0, 8.0], [3.5, 5.0]])
    center_jitter: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least one foreground class", "data.num_classes")
        if len(self.radii) != self.num_classes - 1:
            raise ConfigError(f"need {self.num_classes - 1} radius ranges", "data.radii")
        if self.channels < 1 or self.extent < 2 or self.noise < 0:
            raise ConfigError("channels, extent and noise must be positive", "data")
        for i, (lo, hi) in enumerate(self.radii):
            if not 0 < lo <= hi:
                raise ConfigError(f"bad radius range {(lo, hi)}", f"data.radii[{i}]")
            if i and hi >= self.radii[i - 1][0]:
                raise ConfigError("inner class radii must stay below the enclosing class's minimum", f"data.radii[{i}]")
        if self.radii[0][1] + self.center_jitter > self.extent / 2 - 0.5:
            raise ConfigError(
                f"outer radius {self.radii[0][1]} + jitter {self.center_jitter} exceeds the volume extent {self.extent}",
                "data.radii[0]",
            )

    def intensity_table(self) -> np.ndarray:
        """``[num_classes, channels]`` noise-free intensity of every class."""
        if self.num_classes == 4 and self.channels == 4:
            return _DEFAULT_INTENSITY.copy()
        levels = np.arange(self.num_classes) / (self.num_classes - 1)
        gammas = 0.5 + np.arange(self.channels) * 0.5
        return levels[:, None] ** gammas[None, :]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any], path: str = "data") -> "SyntheticDataSpec":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError("unknown key", f"{path}.{key}")
        return cls(**d)


@dataclass
class Ellipsoid:
    center: np.ndarray
    axes: np.ndarray

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * float(np.prod(self.axes))

    def mask(self, extent: int) -> np.ndarray:
        g = np.arange(extent, dtype=np.float64)
        z, y, x = np.meshgrid(g, g, g, indexing="ij")
        r = ((z - self.center[0]) / self.axes[0]) ** 2
        r += ((y - self.center[1]) / self.axes[1]) ** 2
        r += ((x - self.center[2]) / self.axes[2]) ** 2
        return r <= 1.0


def phantom_geometry(spec: SyntheticDataSpec, index: int) -> list[Ellipsoid]:
    """Nested axis-aligned ellipsoids, outermost first; each lies strictly inside its parent."""
    rng = np.random.default_rng([spec.seed, index, 0])
    mid = (spec.extent - 1) / 2.0
    shapes = []
    center = mid + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
    parent_min = None
    for lo, hi in spec.radii:
        axes = rng.uniform(lo, hi, size=3)
        if parent_min is not None:
            # |offset| + max(axes) <= parent_min keeps the child inside the parent
            slack = parent_min - axes.max()
            center = center + rng.uniform(-1.0, 1.0, size=3) * slack / (2.0 * math.sqrt(3.0))
        shapes.append(Ellipsoid(center.copy(), axes))
        parent_min = axes.min()
    return shapes


def generate_synthetic(spec: SyntheticDataSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(volume [C, D, H, W] float32, labels [D, H, W] uint8)``, deterministic in (seed, index)."""
    labels = np.zeros((spec.extent,) * 3, dtype=np.uint8)
    for k, ell in enumerate(phantom_geometry(spec, index), start=1):
        labels[ell.mask(spec.extent)] = k
    table = spec.intensity_table()
    volume = np.moveaxis(table[labels], -1, 0)
    if spec.noise > 0:
        noise_rng = np.random.default_rng([spec.seed, index, 1])
        volume = volume + noise_rng.normal(0.0, spec.noise, size=volume.shape)
    return volume.astype(np.float32), labels


def make_batch(spec: SyntheticDataSpec, indices) -> tuple[np.ndarray, np.ndarray]:
    pairs = [generate_synthetic(spec, int(i)) for i in indices]
    return np.stack([v for v, _ in pairs]), np.stack([lb for _, lb in pairs])
