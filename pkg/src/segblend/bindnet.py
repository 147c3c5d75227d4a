"""Small feature-binding network with hand-written reverse mode.

Layout is NHWC throughout. The encoder is a stack of stride-1 3x3 "same"
convolutions with ReLU; two 1x1 heads give the dominant (``s_t``) and
phantom (``s_p``) logits, and the binding head maps their concatenation
through 1x1 -> ReLU -> 1x1 to the final logits ``s_fb``.

Convolution weights are stored as ``(3, 3, c_in, c_out)``; 1x1 weights as
``(c_in, c_out)``.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .dataset import IGNORE_INDEX

PPA_EPS = 1e-8
CHECKPOINT_FORMAT = "segblend-bindnet-v1"
FBH_NAMES = ("fb0_w", "fb0_b", "fb1_w", "fb1_b")


@dataclass
class BindNetParams:
    n_classes: int
    tensors: dict[str, np.ndarray]
    channels: tuple[int, ...] = (16, 16, 16)
    fb_hidden: int = 16
    # head used by ``predict`` when none is given; stage 2 switches it to "t"
    inference_head: str = "fb"

    @classmethod
    def init(cls, n_classes: int, rng: np.random.Generator, channels=(16, 16, 16), fb_hidden: int = 16,
             dtype=np.float64) -> "BindNetParams":
        """He-normal weights, zero biases."""
        t: dict[str, np.ndarray] = {}
        c_in = 3
        for i, c in enumerate(channels):
            t[f"enc{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (3, 3, c_in, c)).astype(dtype)
            t[f"enc{i}_b"] = np.zeros(c, dtype=dtype)
            c_in = c
        for head in ("t", "p"):
            t[f"head_{head}_w"] = rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, n_classes)).astype(dtype)
            t[f"head_{head}_b"] = np.zeros(n_classes, dtype=dtype)
        t["fb0_w"] = rng.normal(0.0, np.sqrt(2.0 / (2 * n_classes)), (2 * n_classes, fb_hidden)).astype(dtype)
        t["fb0_b"] = np.zeros(fb_hidden, dtype=dtype)
        t["fb1_w"] = rng.normal(0.0, np.sqrt(1.0 / fb_hidden), (fb_hidden, n_classes)).astype(dtype)
        t["fb1_b"] = np.zeros(n_classes, dtype=dtype)
        return cls(n_classes, t, tuple(channels), fb_hidden)

    @property
    def dtype(self):
        return self.tensors["enc0_w"].dtype

    @property
    def depth(self) -> int:
        return len(self.channels)

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "BindNetParams":
        return BindNetParams(self.n_classes, {k: v.copy() for k, v in self.tensors.items()},
                             self.channels, self.fb_hidden, self.inference_head)

    def astype(self, dtype) -> "BindNetParams":
        return BindNetParams(self.n_classes, {k: v.astype(dtype) for k, v in self.tensors.items()},
                             self.channels, self.fb_hidden, self.inference_head)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def equals(self, other: "BindNetParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


@dataclass
class PredictionMaps:
    s_t: np.ndarray
    s_p: np.ndarray
    s_fb: np.ndarray


@dataclass
class LossBreakdown:
    l_fb: float = 0.0
    l_t: float = 0.0
    l_p: float = 0.0
    l_ppa: float = 0.0
    total: float = 0.0
    delta: float = 1.0


# -- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """Columns ordered (kh, kw, c) to match ``(3, 3, c_in, c_out)`` weights."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=-1)
    return cols.reshape(n * h * w, 9 * c)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, h, wd, -1), cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, need_dx: bool = True):
    n, h, wd, c = x_shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, w.shape[-1]).T).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _as_batch(images: np.ndarray, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=dtype)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected HxWx3 or NxHxWx3 input, got {x.shape}")
    return x, False


def _forward(params: BindNetParams, x: np.ndarray, with_fbh: bool = True):
    if x.shape[-1] != 3:
        raise ValueError(f"input must have 3 channels, got {x.shape[-1]}")
    t = params.tensors
    cache = {"enc": []}
    h = x
    for i in range(params.depth):
        z, cols = conv3x3(h, t[f"enc{i}_w"], t[f"enc{i}_b"])
        cache["enc"].append((cols, h.shape, z))
        h = np.maximum(z, 0)
    cache["feat"] = h
    s_t = h @ t["head_t_w"] + t["head_t_b"]
    s_p = h @ t["head_p_w"] + t["head_p_b"]
    if with_fbh:
        u = np.concatenate([s_t, s_p], axis=-1)
        z = u @ t["fb0_w"] + t["fb0_b"]
        a = np.maximum(z, 0)
        s_fb = a @ t["fb1_w"] + t["fb1_b"]
        cache.update(u=u, fb_z=z, fb_a=a)
    else:
        s_fb = None
    return PredictionMaps(s_t, s_p, s_fb), cache


def forward(params: BindNetParams, images: np.ndarray) -> PredictionMaps:
    """Logit maps for one image (HxWx3) or a batch (NxHxWx3)."""
    x, single = _as_batch(images, params.dtype)
    preds, _ = _forward(params, x)
    if single:
        return PredictionMaps(preds.s_t[0], preds.s_p[0], preds.s_fb[0])
    return preds


def _backward(params: BindNetParams, cache, ds_t, ds_p, ds_fb) -> dict[str, np.ndarray]:
    t = params.tensors
    grads = params.zeros_like()
    n = params.n_classes
    feat = cache["feat"]
    if ds_fb is not None:
        a = cache["fb_a"]
        m = ds_fb.reshape(-1, n)
        grads["fb1_w"] = a.reshape(-1, a.shape[-1]).T @ m
        grads["fb1_b"] = m.sum(axis=0)
        dz = (ds_fb @ t["fb1_w"].T) * (cache["fb_z"] > 0)
        dz2 = dz.reshape(-1, dz.shape[-1])
        u = cache["u"]
        grads["fb0_w"] = u.reshape(-1, u.shape[-1]).T @ dz2
        grads["fb0_b"] = dz2.sum(axis=0)
        du = dz @ t["fb0_w"].T
        ds_t = ds_t + du[..., :n]
        ds_p = ds_p + du[..., n:]
    f2 = feat.reshape(-1, feat.shape[-1])
    dfeat = np.zeros_like(feat)
    for head, ds in (("t", ds_t), ("p", ds_p)):
        if ds is None:
            continue
        grads[f"head_{head}_w"] = f2.T @ ds.reshape(-1, n)
        grads[f"head_{head}_b"] = ds.reshape(-1, n).sum(axis=0)
        dfeat += ds @ t[f"head_{head}_w"].T
    dh = dfeat
    for i in reversed(range(params.depth)):
        cols, x_shape, z = cache["enc"][i]
        dz = dh * (z > 0)
        dh, grads[f"enc{i}_w"], grads[f"enc{i}_b"] = conv3x3_backward(
            dz, cols, t[f"enc{i}_w"], x_shape, need_dx=i > 0
        )
    return grads


# -- losses -----------------------------------------------------------------

def _cross_entropy(logits: np.ndarray, target: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Per-sample mean CE over non-ignored pixels, and d(per-sample loss)/d logits.

    ``logits`` is NxHxWxC and ``target`` NxHxW. Samples with no valid pixel
    get loss 0 and zero gradient.
    """
    n_cls = logits.shape[-1]
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape[:-1]}")
    valid = target != ignore_index
    if (target[valid] >= n_cls).any():
        raise ValueError(f"target class out of range for {n_cls} classes")
    tgt = np.where(valid, target, 0).astype(np.int64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    denom = np.maximum(counts, 1)
    losses = -(picked * valid).reshape(valid.shape[0], -1).sum(axis=1) / denom
    grad = np.exp(logp)
    np.put_along_axis(grad, tgt[..., None], np.take_along_axis(grad, tgt[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (valid / denom[:, None, None])[..., None]
    return losses, grad


def pixel_cross_entropy(logits: np.ndarray, target: np.ndarray, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean over non-ignored pixels of -log softmax(logits)[target]; 0 if all ignored."""
    logits = np.asarray(logits, dtype=np.float64)
    losses, _ = _cross_entropy(logits[None], np.asarray(target)[None], ignore_index)
    return float(losses[0])


def _ppa(s_p: np.ndarray):
    pos = s_p > 0
    mass = np.where(pos, s_p, 0).reshape(s_p.shape[0], -1).sum(axis=1)
    losses = np.log(mass + PPA_EPS)
    grad = pos / (mass + PPA_EPS)[:, None, None, None]
    return losses, grad.astype(s_p.dtype)


def ppa_loss(s_p: np.ndarray) -> float:
    """``log(sum(relu(s_p)) + eps)`` over every element of one phantom map."""
    return float(np.log(np.maximum(np.asarray(s_p, dtype=np.float64), 0).sum() + PPA_EPS))


def phantom_mass(s_p: np.ndarray) -> np.ndarray:
    """Per-image ``sum(relu(s_p))``."""
    s_p = np.asarray(s_p)
    if s_p.ndim == 3:
        s_p = s_p[None]
    return np.maximum(s_p, 0).reshape(s_p.shape[0], -1).sum(axis=1)


def _stack_targets(labels) -> np.ndarray:
    arr = np.asarray(labels)
    return arr[None] if arr.ndim == 2 else arr


def loss_stage1(preds: PredictionMaps, gt_dominant, gt_phantom, delta, ignore_index: int = IGNORE_INDEX) -> LossBreakdown:
    """Stage-1 loss ``l_fb + delta * l_t + (1 - delta) * l_p`` (batch mean)."""
    b = _batched(preds)
    ga, gb = _stack_targets(gt_dominant), _stack_targets(gt_phantom)
    d = np.broadcast_to(np.asarray(delta, dtype=np.float64), (ga.shape[0],))
    l_fb, _ = _cross_entropy(b.s_fb, ga, ignore_index)
    l_t, _ = _cross_entropy(b.s_t, ga, ignore_index)
    l_p, _ = _cross_entropy(b.s_p, gb, ignore_index)
    total = l_fb + d * l_t + (1 - d) * l_p
    return LossBreakdown(float(l_fb.mean()), float(l_t.mean()), float(l_p.mean()), 0.0,
                         float(total.mean()), float(d.mean()))


def loss_stage2(preds: PredictionMaps, target, ignore_index: int = IGNORE_INDEX) -> LossBreakdown:
    """Stage-2 loss ``l_t + l_ppa`` on unblended input."""
    b = _batched(preds)
    l_t, _ = _cross_entropy(b.s_t, _stack_targets(target), ignore_index)
    l_ppa, _ = _ppa(b.s_p)
    total = l_t + l_ppa
    return LossBreakdown(0.0, float(l_t.mean()), 0.0, float(l_ppa.mean()), float(total.mean()), 1.0)


def _batched(preds: PredictionMaps) -> PredictionMaps:
    if preds.s_t.ndim == 3:
        return PredictionMaps(preds.s_t[None], preds.s_p[None], None if preds.s_fb is None else preds.s_fb[None])
    return preds


# -- objectives with gradients ------------------------------------------------

def objective(params: BindNetParams, images, stage: str, gt_dominant, gt_phantom=None, delta=1.0,
              ignore_index: int = IGNORE_INDEX):
    """Batch loss and gradient for every parameter tensor.

    ``stage`` is ``"stage1"`` (blended input, both label maps, weights
    ``delta``), ``"stage2"`` (clean input, ``l_t + l_ppa``) or ``"plain"``
    (clean input, ``l_t`` only; the single-head baseline). Losses are means
    over the batch of per-image losses.
    """
    x, _ = _as_batch(images, params.dtype)
    n = x.shape[0]
    ga = _stack_targets(gt_dominant)
    if ga.shape[0] != n:
        raise ValueError("batch size mismatch between images and labels")
    preds, cache = _forward(params, x, with_fbh=stage == "stage1")
    dt = x.dtype
    if stage == "stage1":
        gb = _stack_targets(gt_phantom)
        d = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,))
        l_fb, g_fb = _cross_entropy(preds.s_fb, ga, ignore_index)
        l_t, g_t = _cross_entropy(preds.s_t, ga, ignore_index)
        l_p, g_p = _cross_entropy(preds.s_p, gb, ignore_index)
        w = d.astype(dt)[:, None, None, None]
        ds_fb = g_fb / n
        ds_t = g_t * w / n
        ds_p = g_p * (1 - w) / n
        total = l_fb + d * l_t + (1 - d) * l_p
        br = LossBreakdown(float(l_fb.mean()), float(l_t.mean()), float(l_p.mean()), 0.0,
                           float(total.mean()), float(d.mean()))
    elif stage == "stage2":
        l_t, g_t = _cross_entropy(preds.s_t, ga, ignore_index)
        l_ppa, g_ppa = _ppa(preds.s_p)
        ds_fb, ds_t, ds_p = None, g_t / n, g_ppa / n
        br = LossBreakdown(0.0, float(l_t.mean()), 0.0, float(l_ppa.mean()),
                           float((l_t + l_ppa).mean()), 1.0)
    elif stage == "plain":
        l_t, g_t = _cross_entropy(preds.s_t, ga, ignore_index)
        ds_fb, ds_t, ds_p = None, g_t / n, None
        br = LossBreakdown(0.0, float(l_t.mean()), 0.0, 0.0, float(l_t.mean()), 1.0)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    grads = _backward(params, cache, ds_t, ds_p, ds_fb)
    return br, grads


def backward(params: BindNetParams, images, stage: str, gt_dominant, gt_phantom=None, delta=1.0,
             ignore_index: int = IGNORE_INDEX) -> dict[str, np.ndarray]:
    return objective(params, images, stage, gt_dominant, gt_phantom, delta, ignore_index)[1]


def predict(params: BindNetParams, images, head: str | None = None) -> np.ndarray:
    """Arg-max label map(s) from ``head`` (``fb``, ``t`` or ``p``; default ``params.inference_head``)."""
    head = head or params.inference_head
    if head not in ("fb", "t", "p"):
        raise ValueError(f"unknown head {head!r}")
    preds = forward(params, images)
    logits = {"fb": preds.s_fb, "t": preds.s_t, "p": preds.s_p}[head]
    return logits.argmax(axis=-1).astype(np.uint8)


# -- checkpoints ----------------------------------------------------------------

def save_params(params: BindNetParams, path: str | os.PathLike) -> None:
    """Write an ``.npz`` checkpoint atomically (temp file, then rename)."""
    path = os.fspath(path)
    meta = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__n_classes__": np.array(params.n_classes),
        "__channels__": np.array(params.channels),
        "__fb_hidden__": np.array(params.fb_hidden),
        "__head__": np.array(params.inference_head),
    }
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **meta, **params.tensors)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path: str | os.PathLike) -> BindNetParams:
    with np.load(path) as z:
        if "__format__" not in z or str(z["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        tensors = {k: z[k] for k in z.files if not k.startswith("__")}
        head = str(z["__head__"]) if "__head__" in z else "fb"
        params = BindNetParams(int(z["__n_classes__"]), tensors,
                               tuple(int(c) for c in z["__channels__"]), int(z["__fb_hidden__"]), head)
    expected = BindNetParams.init(params.n_classes, np.random.default_rng(0), params.channels, params.fb_hidden)
    for k, v in expected.tensors.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise ValueError(f"{path}: tensor {k} missing or misshapen")
    return params
