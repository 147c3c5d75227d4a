"""``segblend`` command line.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import synth
from .bindnet import BindNetParams, load_params, save_params
from .blend import BlendConfig, blend_batch, generate_cc_dataset
from .cooccur import compute_cooccurrence, load_matrix, save_matrix
from .dataset import (
    DatasetError,
    crop,
    load_all,
    read_image,
    read_label,
    read_manifest,
    write_image,
    write_label,
)
from .evaluate import (
    EvaluationError,
    SubsetReport,
    confusion,
    miou,
    saliency_curves,
    subset_by_cooccurrence_threshold,
    subset_by_object_count,
    subset_by_occlusion,
    subset_by_unique_count,
    subset_miou,
    write_class_report,
    write_saliency_report,
    write_subset_report,
)
from .train import TrainConfig, predict_batches, train_plain, train_stage1, train_stage2, write_trace

DEFAULT_THRESHOLDS = "50,40,30,20,10"


def _write_meta(path: Path, args: argparse.Namespace, **extra) -> None:
    meta = {k: v for k, v in vars(args).items() if k != "func"}
    meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _blend_config(args) -> BlendConfig:
    return BlendConfig(
        strategy=args.strategy if args.strategy in ("cc", "cm", "mixup", "cutmix") else "cm",
        delta_range=(args.delta_lo, args.delta_hi),
        beta_alpha=args.alpha,
        max_unique_categories=args.gamma,
        delta_override=args.delta_override,
    )


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> None:
    items = synth.generate(args.n, seed=args.seed, size=args.size, prefix=args.prefix)
    out = Path(args.out)
    path = synth.write_dataset(items, out, args.name)
    _write_meta(out / "run.meta", args)
    print(f"wrote {len(items)} samples to {path}")


def cmd_cooccur(args) -> None:
    manifest = read_manifest(args.manifest)
    matrix = compute_cooccurrence(manifest, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_matrix(matrix, out)
    _write_meta(out.with_name(out.name + ".run.meta"), args)
    for i, j, c in matrix.top_pairs(args.top):
        print(f"{i}\t{j}\t{c}")


def _common_crop(batch, size, ignore_index):
    if size is not None:
        return [crop(s, size, "center", ignore_index=ignore_index) for s in batch]
    h = min(s.shape[0] for s in batch)
    w = min(s.shape[1] for s in batch)
    return [crop(s, (h, w), "center", ignore_index=ignore_index) for s in batch]


def cmd_augment(args) -> None:
    manifest = read_manifest(args.manifest)
    config = _blend_config(args)
    if config.strategy == "cm" and not args.matrix:
        raise DatasetError("strategy cm needs --matrix")
    samples = load_all(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg, ign = manifest.background_index, manifest.ignore_index
    if config.strategy == "cc":
        blends = generate_cc_dataset(samples, config, args.seed, bg, ign)
    else:
        matrix = load_matrix(args.matrix) if args.matrix else None
        if matrix is not None and matrix.n != manifest.n_classes:
            raise DatasetError(f"matrix has n={matrix.n}, manifest has {manifest.n_classes} classes")
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(samples))
        blends = []
        for i in range(0, len(order), args.batch_size):
            batch = _common_crop([samples[j] for j in order[i : i + args.batch_size]], args.crop, ign)
            blends.extend(blend_batch(batch, config, rng, matrix, bg, ign))
    n = 0
    with open(out / "blends.tsv", "w") as fh:
        for k, b in enumerate(blends):
            write_image(out / f"{k}_img.png", b.image)
            write_label(out / f"{k}_gta.png", b.gt_dominant)
            write_label(out / f"{k}_gtb.png", b.gt_phantom)
            fh.write(f"{k}\t{b.dominant_id}\t{b.phantom_id}\t{b.delta:.6f}\n")
            n += 1
    _write_meta(out / "run.meta", args, blend_config=asdict(config), n_blends=n)
    print(f"wrote {n} blended samples to {out}")


def _train_config(args, iters) -> TrainConfig:
    return TrainConfig(
        base_lr=args.lr,
        finetune_lr=args.finetune_lr,
        finetune_head_mult=args.finetune_head_mult,
        batch_size=args.batch_size,
        crop_size=args.crop,
        iters=iters,
        epochs=args.epochs,
        seed=args.seed,
        dtype=args.dtype,
    )


def cmd_train(args) -> None:
    manifest = read_manifest(args.manifest)
    if args.stage == "2" and not args.checkpoint:
        raise DatasetError("stage 2 needs --checkpoint from a stage-1 run")
    samples = load_all(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_cls, ign = manifest.n_classes, manifest.ignore_index
    params: BindNetParams | None = None
    if args.strategy == "plain":
        res = train_plain(samples, n_cls, _train_config(args, args.iters), ign)
        write_trace(res.trace, out / "trace_plain.tsv")
        params = res.params
    else:
        if args.stage in ("1", "both"):
            matrix = load_matrix(args.matrix) if args.matrix else None
            config = _train_config(args, args.iters)
            res = train_stage1(samples, n_cls, _blend_config(args), config, matrix,
                               background_index=manifest.background_index, ignore_index=ign)
            write_trace(res.trace, out / "trace_stage1.tsv")
            params = res.params
            save_params(params, out / "stage1.npz")
        if args.stage in ("2", "both"):
            if params is None:
                params = load_params(args.checkpoint)
            iters2 = args.iters2 if args.iters2 is not None else args.iters
            res = train_stage2(params, samples, _train_config(args, iters2), ign)
            write_trace(res.trace, out / "trace_stage2.tsv")
            params = res.params
    save_params(params, out / "checkpoint.npz")
    _write_meta(out / "run.meta", args, n_parameters=params.num_parameters())
    print(f"checkpoint written to {out / 'checkpoint.npz'}")


def cmd_predict(args) -> None:
    manifest = read_manifest(args.manifest)
    params = load_params(args.checkpoint)
    samples = load_all(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = predict_batches(params, [s.image for s in samples], args.head)
    for s, p in zip(samples, preds):
        write_label(out / f"{s.id}.png", p)
    _write_meta(out / "run.meta", args)
    print(f"wrote {len(preds)} predictions to {out}")


def _parse_thresholds(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise DatasetError(f"bad --thresholds {text!r}") from None


def _load_dir_maps(directory: Path, ids, what: str) -> dict[str, np.ndarray]:
    maps = {}
    for i in ids:
        p = directory / f"{i}.png"
        if not p.is_file():
            raise EvaluationError(f"missing {what} for {i}: {p}")
        maps[i] = read_label(p)
    return maps


def cmd_eval(args) -> None:
    manifest = read_manifest(args.manifest)
    ids = manifest.ids
    n, bg, ign = manifest.n_classes, manifest.background_index, manifest.ignore_index
    labels = {s.id: s.label for s in load_all(manifest)}
    preds = _load_dir_maps(Path(args.predictions), ids, "prediction")
    for i in ids:
        if preds[i].shape != labels[i].shape:
            raise EvaluationError(f"prediction for {i} has shape {preds[i].shape}, expected {labels[i].shape}")
    cm = confusion((preds[i] for i in ids), (labels[i] for i in ids), n, ign)
    overall, iou = miou(cm)
    rows = [SubsetReport("all", len(ids), overall)]
    for k in range(1, 5):
        rows.append(subset_miou(f"unique-{k}", subset_by_unique_count(ids, labels, k, 4, bg, ign),
                                preds, labels, n, ign))
    if args.instances:
        inst = _load_dir_maps(Path(args.instances), ids, "instance map")
        for k in range(1, 5):
            rows.append(subset_miou(f"objects-{k}", subset_by_object_count(ids, inst, k), preds, labels, n, ign))
        rows.append(subset_miou("1-occ", subset_by_occlusion(ids, inst, "one"), preds, labels, n, ign))
        rows.append(subset_miou("all-occ", subset_by_occlusion(ids, inst, "all"), preds, labels, n, ign))
    if args.matrix:
        matrix = load_matrix(args.matrix)
        for t in _parse_thresholds(args.thresholds):
            sub = subset_by_cooccurrence_threshold(ids, labels, matrix, t, bg, ign)
            rows.append(subset_miou(f"cooc<{t:g}", sub, preds, labels, n, ign))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_subset_report(rows, out / "report.tsv")
    write_class_report(iou, out / "classes.tsv")
    _write_meta(out / "run.meta", args)
    for r in rows:
        print(f"{r.name}\t{r.n_images}\t{r.miou:.4f}")


def cmd_saliency(args) -> None:
    pred_dir, gt_dir = Path(args.predictions), Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise EvaluationError(f"no ground-truth masks in {gt_dir}")
    preds, gts = [], []
    for name in names:
        p = pred_dir / name
        if not p.is_file():
            raise EvaluationError(f"missing saliency prediction {p}")
        preds.append(read_image(p).mean(axis=-1))
        gts.append(read_image(gt_dir / name).mean(axis=-1) > 0.5)
    fbeta, mae = saliency_curves(preds, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_saliency_report(fbeta, mae, out / "saliency.tsv")
    _write_meta(out / "run.meta", args)
    print(f"fbeta\t{fbeta:.4f}\nmae\t{mae:.4f}")


# -- parser -----------------------------------------------------------------------

def _add_blend_flags(p):
    p.add_argument("--delta-lo", type=float, default=0.7)
    p.add_argument("--delta-hi", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=None, help="use beta(alpha, alpha) for the mixing weight")
    p.add_argument("--gamma", type=int, default=3, help="max unique categories before the override")
    p.add_argument("--delta-override", type=float, default=0.9)
    p.add_argument("--matrix", help="co-occurrence matrix file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segblend", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--prefix", default="s")
    p.add_argument("--name", default="manifest.tsv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cooccur", help="compute the category co-occurrence matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("image-count", "pixel-weighted"), default="image-count")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cooccur)

    p = sub.add_parser("augment", help="write blended samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("cc", "cm", "mixup", "cutmix"), default="cm")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_blend_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the binding network or the plain baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("cc", "cm", "mixup", "cutmix", "plain"), default="cm")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--checkpoint", help="stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--iters", type=int, default=None, help="iterations (default: --epochs worth)")
    p.add_argument("--iters2", type=int, default=None, help="stage-2 iterations (default: --iters)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=2.5e-4)
    p.add_argument("--finetune-lr", type=float, default=2.5e-5)
    p.add_argument("--finetune-head-mult", type=float, default=1.0,
                   help="stage-2 learning rate multiplier for the t/p heads")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.add_argument("--seed", type=int, default=0)
    _add_blend_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write arg-max label maps from a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head", choices=("fb", "t", "p"), default=None,
                   help="prediction head (default: the one recorded in the checkpoint)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mIoU overall and on image subsets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True, help="directory of <id>.png label maps")
    p.add_argument("--out", required=True)
    p.add_argument("--instances", help="directory of <id>.png instance maps")
    p.add_argument("--matrix", help="training-set co-occurrence matrix")
    p.add_argument("--thresholds", default=DEFAULT_THRESHOLDS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="max F-beta and MAE over a directory of saliency maps")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_saliency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, EvaluationError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
