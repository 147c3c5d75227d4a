"""Category co-occurrence statistics over a labelled training set."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import IGNORE_INDEX, DatasetError, DatasetManifest, load_sample

MODES = ("image-count", "pixel-weighted")


@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray
    mode: str = "image-count"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DatasetError(f"co-occurrence counts must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DatasetError("co-occurrence counts must be non-negative")
        if self.mode not in MODES:
            raise DatasetError(f"unknown co-occurrence mode {self.mode!r}")

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def __eq__(self, other):
        if not isinstance(other, CooccurrenceMatrix):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.counts, other.counts)

    def top_pairs(self, k: int = 10) -> list[tuple[int, int, int]]:
        """Highest-count unordered off-diagonal pairs as (i, j, count)."""
        i, j = np.triu_indices(self.n, 1)
        c = self.counts[i, j]
        order = np.lexsort((j, i, -c))[:k]
        return [(int(i[o]), int(j[o]), int(c[o])) for o in order if c[o] > 0]


def per_image_counts(label: np.ndarray, n: int, background_index: int = 0,
                     ignore_index: int = IGNORE_INDEX, mode: str = "image-count") -> np.ndarray:
    """Contribution of one label map to the co-occurrence matrix."""
    hist = np.bincount(np.asarray(label, dtype=np.int64).ravel(), minlength=256)[:n].copy()
    if background_index < n:
        hist[background_index] = 0
    if ignore_index < n:
        hist[ignore_index] = 0
    present = (hist > 0).astype(np.int64)
    if mode == "image-count":
        return np.outer(present, present)
    if mode == "pixel-weighted":
        # rows: pixels of class i; columns: image contains class j
        return np.outer(hist, present)
    raise DatasetError(f"unknown co-occurrence mode {mode!r}")


def cooccurrence_from_labels(labels: Iterable[np.ndarray], n_classes: int, background_index: int = 0,
                             ignore_index: int = IGNORE_INDEX, mode: str = "image-count") -> CooccurrenceMatrix:
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for lab in labels:
        counts += per_image_counts(lab, n_classes, background_index, ignore_index, mode)
    return CooccurrenceMatrix(counts, mode)


def compute_cooccurrence(manifest: DatasetManifest, mode: str = "image-count", samples=None) -> CooccurrenceMatrix:
    """Co-occurrence matrix of a manifest.

    In image-count mode ``counts[i, j]`` is the number of images containing
    both ``i`` and ``j`` (the diagonal counts images containing ``i``). In
    pixel-weighted mode it is the number of pixels labelled ``i`` summed over
    images containing ``j``. Background and ignore never contribute.

    ``samples`` may supply already-loaded samples in place of reading files.
    """
    if len(manifest) == 0:
        raise DatasetError("empty dataset")
    if samples is None:
        labels = (load_sample(manifest, i).label for i in manifest.ids)
    else:
        labels = (s.label for s in samples)
    return cooccurrence_from_labels(labels, manifest.n_classes, manifest.background_index,
                                    manifest.ignore_index, mode)


def pair_similarity(cats_k: Iterable[int], cats_m: Iterable[int], matrix: CooccurrenceMatrix) -> int:
    """Total co-occurrence between two category sets: sum of counts[i][j], i in m, j in k."""
    cats_k, cats_m = list(cats_k), list(cats_m)
    for c in cats_k + cats_m:
        if not 0 <= c < matrix.n:
            raise DatasetError(f"class index {c} out of range for n={matrix.n}")
    if not cats_k or not cats_m:
        return 0
    return int(matrix.counts[np.ix_(cats_m, cats_k)].sum())


def save_matrix(matrix: CooccurrenceMatrix, path: str | os.PathLike) -> None:
    lines = [f"n={matrix.n} mode={matrix.mode}"]
    lines += [" ".join(str(int(v)) for v in row) for row in matrix.counts]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matrix(path: str | os.PathLike) -> CooccurrenceMatrix:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty matrix file")
    try:
        head = dict(tok.split("=", 1) for tok in lines[0].split())
        n, mode = int(head["n"]), head["mode"]
    except (KeyError, ValueError):
        raise DatasetError(f"{path}: malformed header {lines[0]!r}") from None
    rows = lines[1:]
    if len(rows) != n:
        raise DatasetError(f"{path}: expected {n} rows, found {len(rows)}")
    try:
        parsed = [[int(v) for v in r.split()] for r in rows]
    except ValueError:
        raise DatasetError(f"{path}: non-integer entry") from None
    if any(len(r) != n for r in parsed):
        raise DatasetError(f"{path}: rows must each hold {n} entries")
    return CooccurrenceMatrix(np.array(parsed, dtype=np.int64).reshape(n, n), mode)
