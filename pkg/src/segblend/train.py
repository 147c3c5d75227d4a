"""SGD training loops for the binding network.

Stage 1 trains every tensor on blended batches; stage 2 fine-tunes the
encoder and both prediction heads on clean crops while the binding head
stays frozen. ``train_plain`` is the single-head, no-blending baseline.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bindnet import FBH_NAMES, BindNetParams, LossBreakdown, objective, phantom_mass, forward, predict
from .blend import BlendConfig, BlendedSample, blend_batch, generate_cc_dataset
from .cooccur import CooccurrenceMatrix, cooccurrence_from_labels
from .dataset import IGNORE_INDEX, SegSample, crop


@dataclass
class TrainConfig:
    base_lr: float = 2.5e-4
    finetune_lr: float = 2.5e-5
    # stage-2 learning rate multiplier for the t/p prediction heads
    finetune_head_mult: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 50
    poly_power: float = 0.9
    batch_size: int = 8
    crop_size: int | None = None
    iters: int | None = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("base_lr", "finetune_lr", "finetune_head_mult"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolve_iters(self, n_samples: int) -> int:
        """Explicit ``iters`` or ``epochs`` worth of batches."""
        if self.iters is not None:
            return int(self.iters)
        return self.epochs * max(1, -(-n_samples // self.batch_size))


@dataclass
class TrainResult:
    params: BindNetParams
    trace: list[LossBreakdown] = field(default_factory=list)


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """``base_lr * (1 - it / max_iter) ** power``."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


def sgd_step(params: BindNetParams, grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             config: TrainConfig, lr: float, frozen: Sequence[str] = (),
             lr_scale: dict[str, float] | None = None) -> BindNetParams:
    """In-place momentum SGD with L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Tensors named in ``frozen`` are left untouched; ``lr_scale`` multiplies
    the step of individual tensors.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k}")
    for k, p in params.tensors.items():
        if k in frozen:
            continue
        v = velocity.setdefault(k, np.zeros_like(p))
        v *= config.momentum
        v += grads[k]
        if config.weight_decay:
            v += config.weight_decay * p
        p -= (lr * lr_scale.get(k, 1.0) if lr_scale else lr) * v
    return params


def _window(shape, size, rng):
    h, w = shape
    y0 = int(rng.integers(0, max(h - size, 0) + 1))
    x0 = int(rng.integers(0, max(w - size, 0) + 1))
    return y0, x0


def crop_blended(b: BlendedSample, size: int, rng: np.random.Generator,
                 ignore_index: int = IGNORE_INDEX) -> BlendedSample:
    """Random crop applied identically to the image and both label maps."""
    h, w = b.gt_dominant.shape
    ph, pw = max(size - h, 0), max(size - w, 0)
    image, ga, gb = b.image, b.gt_dominant, b.gt_phantom
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        ga = np.pad(ga, ((0, ph), (0, pw)), constant_values=ignore_index)
        gb = np.pad(gb, ((0, ph), (0, pw)), constant_values=ignore_index)
    y0, x0 = _window(ga.shape, size, rng)
    box = (slice(y0, y0 + size), slice(x0, x0 + size))
    return BlendedSample(image[box], ga[box], gb[box], b.delta, b.dominant_id, b.phantom_id)


def _draw(samples: Sequence, batch_size: int, rng: np.random.Generator) -> list:
    idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
    return [samples[i] for i in idx]


def _crop_clean(batch: Sequence[SegSample], size: int | None, rng, ignore_index) -> list[SegSample]:
    if size is None:
        return list(batch)
    return [crop(s, size, "random", rng, ignore_index) for s in batch]


def _stack(items, attr):
    return np.stack([getattr(s, attr) for s in items])


def train_stage1(samples: Sequence[SegSample], n_classes: int, blend_config: BlendConfig,
                 config: TrainConfig, matrix: CooccurrenceMatrix | None = None,
                 params: BindNetParams | None = None, background_index: int = 0,
                 ignore_index: int = IGNORE_INDEX) -> TrainResult:
    """Train all tensors on blended data with the stage-1 loss.

    Online strategies blend each freshly drawn, cropped batch; ``cc`` first
    generates the offline blend set and draws batches from it.
    """
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    if params is None:
        params = BindNetParams.init(n_classes, rng, dtype=dtype)
    iters = config.resolve_iters(len(samples))
    if blend_config.strategy == "cm" and matrix is None:
        matrix = cooccurrence_from_labels((s.label for s in samples), n_classes, background_index, ignore_index)
    pool = None
    if blend_config.strategy == "cc":
        pool = list(generate_cc_dataset(samples, blend_config, config.seed, background_index, ignore_index))
        if not pool:
            raise ValueError("categorical clustering produced no blends")
    result = TrainResult(params)
    velocity: dict[str, np.ndarray] = {}
    for it in range(iters):
        if pool is not None:
            blends = _draw(pool, config.batch_size, rng)
            if config.crop_size is not None:
                blends = [crop_blended(b, config.crop_size, rng, ignore_index) for b in blends]
        else:
            batch = _crop_clean(_draw(samples, config.batch_size, rng), config.crop_size, rng, ignore_index)
            blends = blend_batch(batch, blend_config, rng, matrix, background_index, ignore_index)
        br, grads = objective(params, _stack(blends, "image"), "stage1", _stack(blends, "gt_dominant"),
                              _stack(blends, "gt_phantom"), np.array([b.delta for b in blends]), ignore_index)
        sgd_step(params, grads, velocity, config, poly_lr(config.base_lr, it, iters, config.poly_power))
        result.trace.append(br)
    return result


def _train_clean(params: BindNetParams, samples: Sequence[SegSample], config: TrainConfig, stage: str,
                 lr0: float, frozen: Sequence[str], seed: int, ignore_index: int,
                 lr_scale: dict[str, float] | None = None) -> TrainResult:
    rng = np.random.default_rng(seed)
    iters = config.resolve_iters(len(samples))
    result = TrainResult(params)
    velocity: dict[str, np.ndarray] = {}
    for it in range(iters):
        batch = _crop_clean(_draw(samples, config.batch_size, rng), config.crop_size, rng, ignore_index)
        br, grads = objective(params, _stack(batch, "image"), stage, _stack(batch, "label"),
                              ignore_index=ignore_index)
        sgd_step(params, grads, velocity, config, poly_lr(lr0, it, iters, config.poly_power), frozen,
                 lr_scale)
        result.trace.append(br)
    return result


def train_stage2(params: BindNetParams, samples: Sequence[SegSample], config: TrainConfig,
                 ignore_index: int = IGNORE_INDEX, freeze_binding_head: bool = True) -> TrainResult:
    """Denoising fine-tune on unblended samples with ``l_t + l_ppa``.

    Starts from a copy of ``params`` with fresh momentum buffers and the
    fine-tuning learning rate. The t/p heads step ``finetune_head_mult``
    times faster than the encoder, so phantom suppression can happen in
    the head rather than by eroding shared features.
    """
    frozen = FBH_NAMES if freeze_binding_head else ()
    scale = {k: config.finetune_head_mult for k in params.names() if k.startswith("head_")}
    # distinct stream from stage 1 under the same seed
    result = _train_clean(params.copy(), samples, config, "stage2", config.finetune_lr, frozen,
                          config.seed + 1_000_003, ignore_index, scale)
    # the frozen binding head never saw a suppressed phantom branch
    result.params.inference_head = "t"
    return result


def train_plain(samples: Sequence[SegSample], n_classes: int, config: TrainConfig,
                ignore_index: int = IGNORE_INDEX) -> TrainResult:
    """Single-head baseline: same encoder, ``l_t`` only, no blending."""
    rng = np.random.default_rng(config.seed)
    params = BindNetParams.init(n_classes, rng, dtype=np.dtype(config.dtype))
    params.inference_head = "t"
    return _train_clean(params, samples, config, "plain", config.base_lr, (), config.seed, ignore_index)


def predict_batches(params: BindNetParams, images: Sequence[np.ndarray], head: str | None = None,
                    chunk: int = 16) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), chunk):
        out.extend(predict(params, np.stack(images[i : i + chunk]), head))
    return out


def mean_phantom_mass(params: BindNetParams, images: Sequence[np.ndarray], chunk: int = 16) -> float:
    masses = []
    for i in range(0, len(images), chunk):
        masses.append(phantom_mass(forward(params, np.stack(images[i : i + chunk])).s_p))
    return float(np.concatenate(masses).mean())


TRACE_HEADER = "iter\tl_fb\tl_t\tl_p\tl_ppa\ttotal"


def write_trace(trace: Sequence[LossBreakdown], path: str | os.PathLike, start: int = 0) -> None:
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for i, b in enumerate(trace, start):
            fh.write(f"{i}\t{b.l_fb:.8g}\t{b.l_t:.8g}\t{b.l_p:.8g}\t{b.l_ppa:.8g}\t{b.total:.8g}\n")
