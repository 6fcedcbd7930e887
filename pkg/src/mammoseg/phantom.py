"""Seeded synthetic mammogram-like ROIs with round/oval/lobular/irregular masses.

All randomness flows through Philox (a counter-based bit generator) keyed by
``SeedSequence([seed, index])``, so sample ``i`` is the same whatever order or
process generates it.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractViolation
from .imaging import resize_bilinear

SHAPE_LABELS = ("irregular", "lobular", "oval", "round")


def label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < len(SHAPE_LABELS):
            raise ContractViolation(f"shape label index {label} out of range")
        return int(label)
    try:
        return SHAPE_LABELS.index(label)
    except ValueError:
        raise ContractViolation(f"unknown shape label {label!r}") from None


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


@dataclass
class PhantomSpec:
    size: int = 256
    contrast: float = 0.4
    noise: float = 0.03
    counts: Tuple[int, int, int, int] = (50, 50, 50, 50)
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if self.size < 64:
            raise ConfigurationError(f"phantom size must be >= 64, got {self.size}")
        if not 0 < self.contrast <= 1:
            raise ConfigurationError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.noise < 0 or self.contrast <= self.noise:
            raise ConfigurationError("noise level must be nonnegative and below the contrast")
        if len(self.counts) != len(SHAPE_LABELS) or min(self.counts) < 0:
            raise ConfigurationError(f"counts must be four nonnegative ints, got {self.counts}")

    def labels(self) -> List[int]:
        """Round-robin class order so every prefix stays near-balanced."""
        remaining = list(self.counts)
        order = []
        while any(remaining):
            for c in range(len(remaining)):
                if remaining[c]:
                    order.append(c)
                    remaining[c] -= 1
        return order


@dataclass
class PhantomSample:
    roi: np.ndarray
    mask: np.ndarray
    label: int

    @property
    def label_name(self) -> str:
        return SHAPE_LABELS[self.label]


# -- rasterisation ---------------------------------------------------------

def _grid(size: int):
    y, x = np.mgrid[:size, :size].astype(np.float64) + 0.5
    return x, y


def _ellipse(x, y, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon(x, y, vx, vy):
    """Even-odd point-in-polygon on pixel centres."""
    inside = np.zeros(x.shape, dtype=bool)
    n = len(vx)
    for i in range(n):
        x1, y1, x2, y2 = vx[i], vy[i], vx[(i + 1) % n], vy[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > y) != (y2 > y)
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def sample_shape_mask(label, size: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterise one random mass outline of the given shape class."""
    if size < 64:
        raise ContractViolation(f"mask size must be >= 64, got {size}")
    label = label_index(label)
    x, y = _grid(size)
    cx, cy = rng.uniform(size / 3, 2 * size / 3, 2)
    name = SHAPE_LABELS[label]
    if name == "round":
        r = rng.uniform(0.15, 0.3) * size
        m = (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    elif name == "oval":
        ratio = rng.uniform(1.6, 3.0)
        a = rng.uniform(0.18, 0.3) * size
        m = _ellipse(x, y, cx, cy, a, a / ratio, rng.uniform(0, np.pi))
    elif name == "lobular":
        n = int(rng.integers(3, 7))
        base = rng.uniform(0.09, 0.13) * size
        phase = rng.uniform(0, 2 * np.pi)
        m = np.zeros(x.shape, dtype=bool)
        for k in range(n):
            ang = phase + 2 * np.pi * k / n + rng.uniform(-0.3, 0.3)
            a = base * rng.uniform(0.8, 1.1)
            # d < a: every lobe covers the common centre, so lobes overlap
            d = a * rng.uniform(0.7, 0.95)
            b = a * rng.uniform(0.5, 0.8)
            m |= _ellipse(x, y, cx + d * np.cos(ang), cy + d * np.sin(ang), a, b, ang)
    else:
        n = int(rng.integers(12, 21))
        r = rng.uniform(0.15, 0.25) * size
        ang = 2 * np.pi * (np.arange(n) + rng.uniform(-0.3, 0.3, n)) / n + rng.uniform(0, 2 * np.pi)
        rad = r * (1 + rng.uniform(-0.45, 0.45, n))
        m = _polygon(x, y, cx + rad * np.cos(ang), cy + rad * np.sin(ang))
    return m.astype(np.uint8)


def crofton_perimeter(mask) -> float:
    """Cauchy-Crofton perimeter from boundary crossings along four directions."""
    m = np.pad(np.asarray(mask, dtype=np.int8), 1)
    n0 = np.count_nonzero(np.diff(m, axis=1))
    n90 = np.count_nonzero(np.diff(m, axis=0))
    n45 = np.count_nonzero(m[1:, 1:] != m[:-1, :-1])
    n135 = np.count_nonzero(m[1:, :-1] != m[:-1, 1:])
    return 0.5 * (np.pi / 4) * (n0 + n90 + (n45 + n135) / np.sqrt(2))


def circularity(mask) -> float:
    """4*pi*area / perimeter**2; 1 for a disk, smaller for ragged outlines."""
    area = float(np.count_nonzero(mask))
    if area == 0:
        return 0.0
    return 4 * np.pi * area / crofton_perimeter(mask) ** 2


# -- rendering ---------------------------------------------------------------

def render_phantom_roi(mask, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth parenchyma-like background plus a soft-edged bright mass and noise."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    coarse = rng.uniform(0.35, 0.55) + rng.uniform(-0.05, 0.05, (4, 4))
    background = resize_bilinear(coarse, w, h)
    soft = np.clip(ndimage.gaussian_filter(m, 2.0, mode="constant"), 0.0, 1.0)
    img = background + spec.contrast * soft
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_sample(spec: PhantomSpec, index: int, label) -> PhantomSample:
    rng = sample_rng(spec.seed, index)
    mask = sample_shape_mask(label, spec.size, rng)
    return PhantomSample(render_phantom_roi(mask, spec, rng), mask, label_index(label))


def iter_samples(spec: PhantomSpec) -> Iterator[PhantomSample]:
    for i, label in enumerate(spec.labels()):
        yield make_sample(spec, i, label)


def generate(spec: PhantomSpec) -> List[PhantomSample]:
    return list(iter_samples(spec))


def generate_dataset(spec: PhantomSpec, out_dir) -> str:
    """Write images/, masks/, labels.csv and manifest.json under ``out_dir``."""
    from .dataset import Dataset, write_dataset

    samples = generate(spec)
    names = [f"phantom_{i:05d}.pgm" for i in range(len(samples))]
    ds = Dataset(names, [s.roi for s in samples], [s.mask for s in samples],
                 [s.label for s in samples])
    manifest = {"generator": "mammoseg.phantom", "spec": asdict(spec),
                "rng": "Philox4x64 keyed by SeedSequence([seed, index])",
                "samples": len(samples)}
    write_dataset(ds, out_dir, manifest=manifest)
    return os.fspath(out_dir)
