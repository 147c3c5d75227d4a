"""Synthetic shapes: circles, rectangles and triangles on a noisy background.

Class 1 is a circle, 2 a rectangle, 3 a triangle; each class also has its own
base colour so a shallow network can tell them apart. Circles and rectangles
tend to appear together, which gives the co-occurrence matrix some structure.
Objects may overlap; later objects occlude earlier ones.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, SegSample, write_image, write_label, write_manifest

N_CLASSES = 4
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
CLASS_COLOURS = {1: (0.85, 0.25, 0.2), 2: (0.25, 0.8, 0.3), 3: (0.25, 0.35, 0.9)}
# preferred companion class for a second/third object
PARTNER = {1: 2, 2: 1, 3: 3}


@dataclass
class SynthSample:
    sample: SegSample
    instances: np.ndarray  # 0 = no instance, k = k-th visible object


def _shape_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    r = rng.uniform(size * 0.12, size * 0.25)
    cy, cx = rng.uniform(r, size - r, 2)
    if cls == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 2:
        hy, hx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    # upward isosceles triangle with apex at (cy - r, cx)
    t = (yy - (cy - r)) / (2 * r)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)


def make_sample(id: str, rng: np.random.Generator, size: int = 64, max_objects: int = 3) -> SynthSample:
    base = rng.uniform(0.35, 0.65)
    image = base + rng.normal(0, 0.05, (size, size, 3))
    label = np.zeros((size, size), dtype=np.uint8)
    instances = np.zeros((size, size), dtype=np.uint8)
    n_obj = int(rng.choice(np.arange(1, max_objects + 1), p=_count_probs(max_objects)))
    first = int(rng.integers(1, 4))
    classes = [first] + [PARTNER[first] if rng.random() < 0.6 else int(rng.integers(1, 4))
                         for _ in range(n_obj - 1)]
    for k, cls in enumerate(classes, 1):
        mask = _shape_mask(cls, size, rng)
        colour = np.clip(np.array(CLASS_COLOURS[cls]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
        image[mask] = colour + rng.normal(0, 0.04, (int(mask.sum()), 3))
        label[mask] = cls
        instances[mask] = k
    instances = _renumber(instances)
    return SynthSample(SegSample(id, np.clip(image, 0.0, 1.0), label), instances)


def _count_probs(max_objects: int) -> np.ndarray:
    p = np.array([0.4, 0.4, 0.2] + [0.1] * max(0, max_objects - 3))[:max_objects]
    return p / p.sum()


def _renumber(instances: np.ndarray) -> np.ndarray:
    """Relabel visible instances as 1..k, dropping fully occluded ones."""
    out = np.zeros_like(instances)
    for new, old in enumerate(v for v in np.unique(instances) if v != 0):
        out[instances == old] = new + 1
    return out


def generate(n: int, seed: int = 0, size: int = 64, prefix: str = "s") -> list[SynthSample]:
    rng = np.random.default_rng(seed)
    return [make_sample(f"{prefix}{i:05d}", rng, size) for i in range(n)]


def write_dataset(items: list[SynthSample], out: str | os.PathLike, name: str = "manifest.tsv") -> Path:
    """Write images, labels, instance maps and a manifest under ``out``."""
    out = Path(out)
    for sub in ("images", "labels", "instances"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for it in items:
        s = it.sample
        write_image(out / "images" / f"{s.id}.png", s.image)
        write_label(out / "labels" / f"{s.id}.png", s.label)
        write_label(out / "instances" / f"{s.id}.png", it.instances)
        entries.append((s.id, f"images/{s.id}.png", f"labels/{s.id}.png"))
    path = out / name
    write_manifest(DatasetManifest(entries=entries, n_classes=N_CLASSES), path)
    return path


def occlusion_test_split(samples: list[SegSample], delta: float = 0.7, seed: int = 0) -> list[SegSample]:
    """Every sample blended with a random other sample at fixed ``delta``.

    The dominant label is kept as the target.
    """
    rng = np.random.default_rng(seed)
    n = len(samples)
    out = []
    for k, s in enumerate(samples):
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= k else j
        b = samples[j]
        out.append(SegSample(f"{s.id}+{b.id}", delta * s.image + (1 - delta) * b.image, s.label))
    return out
