"""Image/label pairs, manifests and cropping.

Images are float arrays of shape (H, W, 3) in [0, 1]; label maps are uint8
arrays of shape (H, W) holding class indices or the ignore value.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IGNORE_INDEX = 255


class DatasetError(ValueError):
    """Raised when a sample or manifest violates its invariants."""


@dataclass
class SegSample:
    id: str
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.label.shape != self.image.shape[:2]:
            raise DatasetError(
                f"{self.id}: dimension mismatch image {self.image.shape[:2]} vs label {self.label.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str, str]] = field(default_factory=list)
    n_classes: int = 21
    background_index: int = 0
    ignore_index: int = IGNORE_INDEX
    root: Path = Path(".")

    def __post_init__(self):
        if self.n_classes < 2:
            raise DatasetError("n_classes must be >= 2")
        if not 0 <= self.background_index < self.n_classes:
            raise DatasetError("background_index must be < n_classes")
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids must be unique")
        self._index = {e[0]: e for e in self.entries}

    @property
    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def entry(self, id: str) -> tuple[str, str, str]:
        try:
            return self._index[id]
        except KeyError:
            raise DatasetError(f"unknown sample id {id!r}") from None

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def foreground_classes(self) -> list[int]:
        return [c for c in range(self.n_classes) if c != self.background_index]


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse a tab-separated manifest.

    The header line ``#classes=<n> background=<b> ignore=<i>`` is required;
    relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    header = None
    entries = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                header = _parse_header(line, lineno)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields")
            entries.append(tuple(parts))
    if header is None:
        raise DatasetError(f"{path}: missing '#classes=...' header")
    return DatasetManifest(entries=entries, root=path.parent, **header)


def _parse_header(line: str, lineno: int) -> dict:
    keys = {"classes": "n_classes", "background": "background_index", "ignore": "ignore_index"}
    out = {}
    for tok in line.lstrip("#").split():
        k, _, v = tok.partition("=")
        if k not in keys or not v:
            raise DatasetError(f"line {lineno}: bad header token {tok!r}")
        try:
            out[keys[k]] = int(v)
        except ValueError:
            raise DatasetError(f"line {lineno}: non-integer header value {tok!r}") from None
    if "n_classes" not in out:
        raise DatasetError(f"line {lineno}: header lacks classes=")
    return out


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(
            f"#classes={manifest.n_classes} background={manifest.background_index} "
            f"ignore={manifest.ignore_index}\n"
        )
        for id, img, lab in manifest.entries:
            fh.write(f"{id}\t{img}\t{lab}\n")


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_label(path: str | os.PathLike) -> np.ndarray:
    # mode "P" yields palette indices directly; palette colours are ignored
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise DatasetError(f"{path}: label must be single-channel indexed, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def voc_palette() -> list[int]:
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def write_label(path: str | os.PathLike, label: np.ndarray) -> None:
    im = Image.fromarray(np.asarray(label, dtype=np.uint8), mode="P")
    im.putpalette(voc_palette())
    im.save(path)


def validate_label(label: np.ndarray, n_classes: int, ignore_index: int = IGNORE_INDEX, id: str = "") -> None:
    bad = (label >= n_classes) & (label != ignore_index)
    if bad.any():
        v = int(label[bad][0])
        raise DatasetError(f"{id}: label value out of range ({v} with n_classes={n_classes})")


def load_sample(manifest: DatasetManifest, id: str) -> SegSample:
    _, img_path, lab_path = manifest.entry(id)
    img_path, lab_path = manifest.resolve(img_path), manifest.resolve(lab_path)
    for p in (img_path, lab_path):
        if not p.is_file():
            raise FileNotFoundError(f"{id}: missing file {p}")
    image = read_image(img_path)
    label = read_label(lab_path)
    validate_label(label, manifest.n_classes, manifest.ignore_index, id)
    return SegSample(id, image, label)


def load_all(manifest: DatasetManifest, ids: Iterable[str] | None = None) -> list[SegSample]:
    return [load_sample(manifest, i) for i in (manifest.ids if ids is None else ids)]


def unique_categories(label: np.ndarray, background_index: int = 0, ignore_index: int = IGNORE_INDEX) -> set[int]:
    """Distinct foreground classes present in ``label``."""
    present = np.flatnonzero(np.bincount(np.asarray(label, dtype=np.int64).ravel(), minlength=256))
    return {int(c) for c in present if c != background_index and c != ignore_index}


def manifest_categories(label: np.ndarray, manifest: DatasetManifest) -> set[int]:
    return unique_categories(label, manifest.background_index, manifest.ignore_index)


def _size_hw(size) -> tuple[int, int]:
    if isinstance(size, (tuple, list)):
        h, w = int(size[0]), int(size[1])
    else:
        h = w = int(size)
    if h < 1 or w < 1:
        raise DatasetError(f"crop size must be >= 1, got {size}")
    return h, w


def crop(
    sample: SegSample,
    size,
    mode: str = "center",
    rng: np.random.Generator | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> SegSample:
    """Crop to ``size`` (int or (h, w)), padding undersized inputs first.

    Padding uses 0.0 for the image and ``ignore_index`` for the label, placed
    at the bottom/right. ``mode="random"`` requires ``rng``.
    """
    ch, cw = _size_hw(size)
    if mode not in ("center", "random"):
        raise DatasetError(f"unknown crop mode {mode!r}")
    image, label = sample.image, sample.label
    h, w = label.shape
    ph, pw = max(ch - h, 0), max(cw - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=0.0)
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=ignore_index)
        h, w = label.shape
    if (h, w) == (ch, cw):
        return SegSample(sample.id, image, label)
    if mode == "center":
        y0, x0 = (h - ch) // 2, (w - cw) // 2
    else:
        if rng is None:
            raise DatasetError("random crop needs an rng")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
    return SegSample(
        sample.id,
        image[y0 : y0 + ch, x0 : x0 + cw].copy(),
        label[y0 : y0 + ch, x0 : x0 + cw].copy(),
    )


def crop_offset(shape: tuple[int, int], size) -> tuple[int, int]:
    """Top-left offset used by a center crop of ``shape`` to ``size``."""
    ch, cw = _size_hw(size)
    return max((shape[0] - ch) // 2, 0), max((shape[1] - cw) // 2, 0)


def in_memory_manifest(samples: Sequence[SegSample], n_classes: int, background_index: int = 0,
                       ignore_index: int = IGNORE_INDEX) -> DatasetManifest:
    """Manifest describing samples that are not backed by files."""
    return DatasetManifest(
        entries=[(s.id, "", "") for s in samples],
        n_classes=n_classes,
        background_index=background_index,
        ignore_index=ignore_index,
    )
