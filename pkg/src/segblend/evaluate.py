"""Segmentation and saliency metrics plus image-subset selection."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cooccur import CooccurrenceMatrix
from .dataset import IGNORE_INDEX, unique_categories


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Pixel tallies, rows = ground truth, columns = prediction."""

    counts: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "ConfusionMatrix":
        return cls(np.zeros((n, n), dtype=np.int64))

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class SubsetReport:
    name: str
    n_images: int
    miou: float


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray,
               ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Add one image's pixels to ``cm`` (returns a new matrix)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != ignore_index
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    n = cm.n
    if (g >= n).any() or (p >= n).any() or (p < 0).any():
        raise EvaluationError(f"class index out of range for {n} classes")
    tally = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + tally)


def confusion(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], n: int,
              ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(n)
    for p, g in zip(preds, gts):
        cm = accumulate(cm, p, g, ignore_index)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with non-zero union, and per-class IoU (NaN when absent)."""
    inter = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise EvaluationError("empty evaluation")
    iou = np.full(cm.n, np.nan)
    iou[present] = inter[present] / union[present]
    return float(iou[present].mean()), iou


# -- subsets ------------------------------------------------------------------

def object_count(instances: np.ndarray) -> int:
    return int(np.count_nonzero(np.unique(instances)))


def count_bucket(count: int, cap: int = 4) -> int:
    """Bucket for the object-count tables; the last bucket means ``>= cap``."""
    return min(count, cap)


def _need_instances(ids: Sequence[str], instances: Mapping[str, np.ndarray] | None) -> None:
    if instances is None:
        raise EvaluationError("instance maps are required for this subset")
    missing = [i for i in ids if i not in instances]
    if missing:
        raise EvaluationError(f"missing instance maps for {missing[:3]}")


def subset_by_object_count(ids: Sequence[str], instances: Mapping[str, np.ndarray] | None, k: int,
                           cap: int = 4) -> list[str]:
    _need_instances(ids, instances)
    return [i for i in ids if count_bucket(object_count(instances[i]), cap) == k]


def subset_by_unique_count(ids: Sequence[str], labels: Mapping[str, np.ndarray], k: int, cap: int = 4,
                           background_index: int = 0, ignore_index: int = IGNORE_INDEX) -> list[str]:
    return [i for i in ids
            if count_bucket(len(unique_categories(labels[i], background_index, ignore_index)), cap) == k]


def occluded_instances(instances: np.ndarray) -> set[int]:
    """Instances whose mask is 4-adjacent to a different instance's mask."""
    inst = np.asarray(instances)
    out: set[int] = set()
    for a, b in ((inst[1:, :], inst[:-1, :]), (inst[:, 1:], inst[:, :-1])):
        touch = (a != b) & (a != 0) & (b != 0)
        out.update(int(v) for v in np.unique(a[touch]))
        out.update(int(v) for v in np.unique(b[touch]))
    return out


def subset_by_occlusion(ids: Sequence[str], instances: Mapping[str, np.ndarray] | None,
                        mode: str = "one") -> list[str]:
    """``one``: at least one occluded instance; ``all``: every instance occluded."""
    if mode not in ("one", "all"):
        raise EvaluationError(f"unknown occlusion mode {mode!r}")
    _need_instances(ids, instances)
    keep = []
    for i in ids:
        occ = occluded_instances(instances[i])
        if not occ:
            continue
        if mode == "one" or len(occ) == object_count(instances[i]):
            keep.append(i)
    return keep


def passes_cooccurrence_threshold(cats: set[int], matrix: CooccurrenceMatrix, t: float) -> bool:
    cs = sorted(cats)
    return all(matrix.counts[a, b] < t for x, a in enumerate(cs) for b in cs[x + 1 :])


def subset_by_cooccurrence_threshold(ids: Sequence[str], labels: Mapping[str, np.ndarray],
                                     matrix: CooccurrenceMatrix, t: float, background_index: int = 0,
                                     ignore_index: int = IGNORE_INDEX) -> list[str]:
    """Images in which every foreground class pair co-occurs fewer than ``t`` times."""
    return [i for i in ids
            if passes_cooccurrence_threshold(unique_categories(labels[i], background_index, ignore_index),
                                             matrix, t)]


def subset_miou(name: str, ids: Sequence[str], preds: Mapping[str, np.ndarray],
                labels: Mapping[str, np.ndarray], n: int, ignore_index: int = IGNORE_INDEX) -> SubsetReport:
    if not ids:
        return SubsetReport(name, 0, float("nan"))
    cm = confusion((preds[i] for i in ids), (labels[i] for i in ids), n, ignore_index)
    try:
        value = miou(cm)[0]
    except EvaluationError:
        value = float("nan")
    return SubsetReport(name, len(ids), value)


# -- saliency -----------------------------------------------------------------

def saliency_metrics(pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3,
                     n_thresholds: int = 256) -> tuple[float, float]:
    """Max F-beta over uniform thresholds, and MAE.

    ``pred`` is a grayscale map in [0, 1], quantised to ``n_thresholds``
    levels; threshold ``k`` marks pixels at level ``> k`` as salient, for
    ``k = 0 .. n_thresholds - 1``. An empty ground truth gives F-beta 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise EvaluationError("prediction and ground truth differ in shape")
    mae = float(np.abs(pred - gt).mean())
    if not gt.any():
        return 0.0, mae
    precision, recall = _pr_curve(pred, gt, n_thresholds)
    return float(_fbeta(precision, recall, beta2).max()), mae


def _pr_curve(pred: np.ndarray, gt: np.ndarray, n_thresholds: int):
    levels = n_thresholds - 1
    q = np.clip(np.rint(pred * levels), 0, levels).astype(np.int64)
    # pixels strictly above each threshold: shifted reverse cumulative histograms
    hist_all = np.bincount(q.ravel(), minlength=n_thresholds + 1)
    hist_tp = np.bincount(q[gt], minlength=n_thresholds + 1)
    pred_pos = np.cumsum(hist_all[::-1])[::-1][1:]
    tp = np.cumsum(hist_tp[::-1])[::-1][1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
    return precision, tp / gt.sum()


def _fbeta(precision, recall, beta2):
    denom = beta2 * precision + recall
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, (1 + beta2) * precision * recall / denom, 0.0)


def saliency_curves(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], beta2: float = 0.3,
                    n_thresholds: int = 256) -> tuple[float, float]:
    """Dataset-level max F-beta (of image-averaged P/R curves) and mean MAE.

    Images with an empty ground truth contribute to MAE only.
    """
    ps, rs, maes = [], [], []
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt) > 0.5
        maes.append(float(np.abs(pred - gt).mean()))
        if gt.any():
            p, r = _pr_curve(pred, gt, n_thresholds)
            ps.append(p)
            rs.append(r)
    if not maes:
        raise EvaluationError("empty evaluation")
    if not ps:
        return 0.0, float(np.mean(maes))
    f = _fbeta(np.mean(ps, axis=0), np.mean(rs, axis=0), beta2)
    return float(f.max()), float(np.mean(maes))


# -- reports ------------------------------------------------------------------

def write_subset_report(rows: Sequence[SubsetReport], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("subset\tn_images\tmiou\n")
        for r in rows:
            fh.write(f"{r.name}\t{r.n_images}\t{r.miou:.6f}\n")


def write_class_report(iou: np.ndarray, path: str | os.PathLike, names: Sequence[str] | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("class\tiou\n")
        for c, v in enumerate(iou):
            fh.write(f"{names[c] if names else c}\t{v:.6f}\n")


def write_saliency_report(fbeta: float, mae: float, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("fbeta\tmae\n")
        fh.write(f"{fbeta:.6f}\t{mae:.6f}\n")
