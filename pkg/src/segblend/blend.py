"""Category-dependent image blending.

Every strategy returns :class:`BlendedSample` records: the mixed image plus
the two unmixed label maps (dominant and phantom) and the weight used.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .cooccur import CooccurrenceMatrix, pair_similarity
from .dataset import IGNORE_INDEX, DatasetError, SegSample, crop, unique_categories

STRATEGIES = ("cc", "cm", "mixup", "cutmix")


@dataclass
class BlendConfig:
    strategy: str = "cm"
    delta_sampler: str = "uniform"  # uniform | beta | fixed
    delta_range: tuple[float, float] = (0.7, 1.0)
    beta_alpha: float | None = None
    fixed_delta: float = 1.0
    max_unique_categories: int = 3
    delta_override: float = 0.9
    # "union": |K ∪ M|; "sum": |K| + |M| as in the original pseudocode
    category_count: str = "union"

    def __post_init__(self):
        self.delta_range = tuple(float(v) for v in self.delta_range)
        if self.beta_alpha is not None and self.delta_sampler == "uniform":
            self.delta_sampler = "beta"
        lo, hi = self.delta_range
        if self.strategy not in STRATEGIES:
            raise DatasetError(f"unknown strategy {self.strategy!r}")
        if self.delta_sampler not in ("uniform", "beta", "fixed"):
            raise DatasetError(f"unknown delta sampler {self.delta_sampler!r}")
        if not (0.0 <= lo <= hi <= 1.0):
            raise DatasetError(f"delta range must satisfy 0 <= lo <= hi <= 1, got {self.delta_range}")
        for name in ("fixed_delta", "delta_override"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1]")
        if self.delta_sampler == "beta" and (self.beta_alpha is None or self.beta_alpha < 0):
            raise DatasetError("beta sampler needs beta_alpha >= 0")
        if self.max_unique_categories < 1:
            raise DatasetError("max_unique_categories must be >= 1")
        if self.category_count not in ("union", "sum"):
            raise DatasetError(f"unknown category_count {self.category_count!r}")


@dataclass
class BlendedSample:
    image: np.ndarray
    gt_dominant: np.ndarray
    gt_phantom: np.ndarray
    delta: float
    dominant_id: str
    phantom_id: str


def sample_delta(config: BlendConfig, rng: np.random.Generator) -> float:
    if config.delta_sampler == "fixed":
        return float(config.fixed_delta)
    if config.delta_sampler == "beta":
        # alpha == 0 disables mixing, as in the batch pseudocode
        return float(rng.beta(config.beta_alpha, config.beta_alpha)) if config.beta_alpha > 0 else 1.0
    lo, hi = config.delta_range
    return float(rng.uniform(lo, hi))


def blend_pair(a: SegSample, b: SegSample, delta: float) -> BlendedSample:
    """``delta * a + (1 - delta) * b``; labels are carried through unmixed."""
    if a.shape != b.shape:
        raise DatasetError(f"dimension mismatch: {a.id} {a.shape} vs {b.id} {b.shape}")
    if not 0.0 <= delta <= 1.0:
        raise DatasetError(f"delta must lie in [0, 1], got {delta}")
    image = delta * a.image + (1.0 - delta) * b.image
    return BlendedSample(image, a.label, b.label, float(delta), a.id, b.id)


def passthrough(a: SegSample) -> BlendedSample:
    return BlendedSample(a.image, a.label, a.label, 1.0, a.id, a.id)


def category_clusters(samples: Sequence[SegSample], background_index: int = 0,
                      ignore_index: int = IGNORE_INDEX) -> dict[int, list[int]]:
    """Map each foreground class to the indices of samples containing it.

    Multi-label images belong to every cluster whose class they contain.
    """
    clusters: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        for c in unique_categories(s.label, background_index, ignore_index):
            clusters.setdefault(c, []).append(idx)
    return dict(sorted(clusters.items()))


def _pair_rng(seed: int, dominant_id: str, cluster: int, partner_cluster: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(dominant_id.encode()), cluster, partner_cluster]
    return np.random.default_rng(np.random.SeedSequence(key))


def generate_cc_dataset(samples: Sequence[SegSample], config: BlendConfig, seed: int = 0,
                        background_index: int = 0, ignore_index: int = IGNORE_INDEX) -> Iterator[BlendedSample]:
    """Offline categorical-clustering blends.

    For every image of every class cluster, one partner is drawn uniformly
    (with replacement) from each other non-empty cluster, and a weight is
    drawn per pair. Each pair has its own RNG stream keyed on
    ``(seed, dominant id, cluster, partner cluster)``, so the output does not
    depend on generation order. A partner identical to the dominant image is
    never chosen; a cluster holding only the dominant image is skipped.
    Partners of a different size are center-cropped/padded to the dominant's.
    """
    clusters = category_clusters(samples, background_index, ignore_index)
    for c, members in clusters.items():
        for ai in members:
            a = samples[ai]
            for d, others in clusters.items():
                if d == c:
                    continue
                candidates = [m for m in others if m != ai]
                if not candidates:
                    continue
                rng = _pair_rng(seed, a.id, c, d)
                b = samples[candidates[int(rng.integers(len(candidates)))]]
                if b.shape != a.shape:
                    b = crop(b, a.shape, "center", ignore_index=ignore_index)
                yield blend_pair(a, b, sample_delta(config, rng))


def _check_batch(batch: Sequence[SegSample]) -> None:
    if len(batch) == 0:
        raise DatasetError("empty batch")


def cm_partners(cats: Sequence[set], matrix: CooccurrenceMatrix, config: BlendConfig):
    """Partner index and category count for each sample of a batch.

    Returns ``(partners, counts)``; a partner of ``-1`` marks a sample with
    no pair of non-zero similarity.
    """
    n = len(cats)
    partners, counts = [], []
    for k in range(n):
        scores = np.zeros(n, dtype=np.int64)
        mixed = np.zeros(n, dtype=np.int64)
        for m in range(n):
            if m == k or not cats[k] or not cats[m]:
                continue
            scores[m] = pair_similarity(cats[k], cats[m], matrix)
            if config.category_count == "union":
                mixed[m] = len(cats[k] | cats[m])
            else:
                mixed[m] = len(cats[k]) + len(cats[m])
        if scores.max(initial=0) <= 0:
            partners.append(-1)
            counts.append(0)
        else:
            top = int(np.argmax(scores))  # first maximum wins ties
            partners.append(top)
            counts.append(int(mixed[top]))
    return partners, counts


def blend_batch_cm(batch: Sequence[SegSample], matrix: CooccurrenceMatrix, config: BlendConfig,
                   rng: np.random.Generator, background_index: int = 0,
                   ignore_index: int = IGNORE_INDEX) -> list[BlendedSample]:
    """Online co-occurrence blending within a batch.

    One weight is drawn for the whole batch. Each sample is mixed with the
    batch member of highest total co-occurrence; pairs whose category count
    exceeds ``max_unique_categories`` use ``delta_override`` instead.
    """
    _check_batch(batch)
    delta = sample_delta(config, rng)
    cats = [unique_categories(s.label, background_index, ignore_index) for s in batch]
    partners, counts = cm_partners(cats, matrix, config)
    out = []
    for k, s in enumerate(batch):
        p = partners[k]
        if p < 0:
            out.append(passthrough(s))
            continue
        d = config.delta_override if counts[k] > config.max_unique_categories else delta
        out.append(blend_pair(s, batch[p], d))
    return out


def _random_partner(k: int, n: int, rng: np.random.Generator) -> int:
    j = int(rng.integers(n - 1))
    return j + 1 if j >= k else j


def blend_batch_mixup(batch: Sequence[SegSample], config: BlendConfig,
                      rng: np.random.Generator) -> list[BlendedSample]:
    _check_batch(batch)
    delta = sample_delta(config, rng)
    if len(batch) == 1:
        return [passthrough(batch[0])]
    return [blend_pair(s, batch[_random_partner(k, len(batch), rng)], delta) for k, s in enumerate(batch)]


def cutmix_box(shape: tuple[int, int], delta: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Rectangle ``(y0, x0, h, w)`` covering about ``1 - delta`` of the image."""
    H, W = shape
    scale = np.sqrt(1.0 - delta)
    h, w = int(np.floor(H * scale)), int(np.floor(W * scale))
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    return y0, x0, h, w


def blend_batch_cutmix(batch: Sequence[SegSample], config: BlendConfig,
                       rng: np.random.Generator) -> list[BlendedSample]:
    """Paste a partner rectangle into each sample, image and dominant label alike."""
    _check_batch(batch)
    delta = sample_delta(config, rng)
    if len(batch) == 1:
        return [passthrough(batch[0])]
    out = []
    for k, a in enumerate(batch):
        b = batch[_random_partner(k, len(batch), rng)]
        if a.shape != b.shape:
            raise DatasetError(f"dimension mismatch: {a.id} {a.shape} vs {b.id} {b.shape}")
        y0, x0, h, w = cutmix_box(a.shape, delta, rng)
        image, label = a.image.copy(), a.label.copy()
        box = (slice(y0, y0 + h), slice(x0, x0 + w))
        image[box] = b.image[box]
        label[box] = b.label[box]
        out.append(BlendedSample(image, label, b.label, delta, a.id, b.id))
    return out


def blend_batch(batch: Sequence[SegSample], config: BlendConfig, rng: np.random.Generator,
                matrix: CooccurrenceMatrix | None = None, background_index: int = 0,
                ignore_index: int = IGNORE_INDEX) -> list[BlendedSample]:
    """Dispatch to the online blender named by ``config.strategy``."""
    if config.strategy == "cm":
        if matrix is None:
            raise DatasetError("strategy cm needs a co-occurrence matrix")
        return blend_batch_cm(batch, matrix, config, rng, background_index, ignore_index)
    if config.strategy == "mixup":
        return blend_batch_mixup(batch, config, rng)
    if config.strategy == "cutmix":
        return blend_batch_cutmix(batch, config, rng)
    raise DatasetError(f"strategy {config.strategy!r} is not an online batch blender")
