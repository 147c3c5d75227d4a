"""Desk-scale comparison: co-occurrence blending + two-stage binding vs. a plain baseline.

Both arms see the same synthetic training images and the same total number
of SGD iterations. The binding arm spends ``stage1_iters`` on blended batches
and the rest denoising on clean crops.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import synth
from .blend import BlendConfig
from .evaluate import confusion, miou
from .train import TrainConfig, mean_phantom_mass, predict_batches, train_plain, train_stage1, train_stage2


@dataclass
class ToyConfig:
    n_train: int = 500
    n_test: int = 100
    image_size: int = 64
    total_iters: int = 2000
    stage1_iters: int = 1500
    occlusion_delta: float = 0.7
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        base_lr=0.01, finetune_lr=1e-5, finetune_head_mult=100.0, batch_size=4, crop_size=32,
        dtype="float32"))
    blend: BlendConfig = field(default_factory=lambda: BlendConfig("cm"))

    @property
    def stage2_iters(self) -> int:
        return self.total_iters - self.stage1_iters


@dataclass
class ToyResult:
    seed: int
    binding_clean: float
    plain_clean: float
    binding_occluded: float
    plain_occluded: float
    mass_stage1: float
    mass_stage2: float
    stage1_first_loss: float
    stage1_last_loss: float
    seconds: float

    @property
    def mass_drop(self) -> float:
        return 1.0 - self.mass_stage2 / self.mass_stage1 if self.mass_stage1 > 0 else 0.0


def _miou(params, samples, n):
    preds = predict_batches(params, [s.image for s in samples])
    return miou(confusion(preds, [s.label for s in samples], n))[0]


def _with(config: TrainConfig, **kw) -> TrainConfig:
    values = dict(config.__dict__)
    values.update(kw)
    return TrainConfig(**values)


def run_seed(seed: int, config: ToyConfig | None = None) -> ToyResult:
    config = config or ToyConfig()
    t0 = time.perf_counter()
    items = synth.generate(config.n_train + config.n_test, seed=seed, size=config.image_size)
    train_set = [it.sample for it in items[: config.n_train]]
    test_set = [it.sample for it in items[config.n_train :]]
    occluded = synth.occlusion_test_split(test_set, config.occlusion_delta, seed)
    n = synth.N_CLASSES
    clean_images = [s.image for s in test_set]

    s1 = train_stage1(train_set, n, config.blend, _with(config.train, iters=config.stage1_iters, seed=seed))
    s2 = train_stage2(s1.params, train_set, _with(config.train, iters=config.stage2_iters, seed=seed))
    plain = train_plain(train_set, n, _with(config.train, iters=config.total_iters, seed=seed))

    totals = [b.total for b in s1.trace]
    window = max(1, min(50, len(totals) // 10))
    return ToyResult(
        seed=seed,
        binding_clean=_miou(s2.params, test_set, n),
        plain_clean=_miou(plain.params, test_set, n),
        binding_occluded=_miou(s2.params, occluded, n),
        plain_occluded=_miou(plain.params, occluded, n),
        mass_stage1=mean_phantom_mass(s1.params, clean_images),
        mass_stage2=mean_phantom_mass(s2.params, clean_images),
        stage1_first_loss=float(np.mean(totals[:window])),
        stage1_last_loss=float(np.mean(totals[-window:])),
        seconds=time.perf_counter() - t0,
    )


def format_result(r: ToyResult) -> str:
    return (f"seed {r.seed}: clean {100 * r.binding_clean:.2f} vs {100 * r.plain_clean:.2f}  "
            f"occluded {100 * r.binding_occluded:.2f} vs {100 * r.plain_occluded:.2f}  "
            f"phantom mass {r.mass_stage1:.1f} -> {r.mass_stage2:.1f} ({100 * r.mass_drop:.0f}% drop)  "
            f"{r.seconds:.0f}s")
