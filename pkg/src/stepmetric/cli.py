"""Command-line entry point for reproducible experiment runs.

Subcommands: gen-data, train, eval, infer, count-combinations. Every
run is deterministic given its config file and seed, and each training
or evaluation run keeps all of its outputs (resolved config, checkpoints,
metrics, reports) inside one output directory.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

# Desk-scale tensors are small enough that thread fan-out costs more than
# it saves; keep math serial unless the user overrides. Must be set
# before numpy loads its BLAS.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from . import config as config_mod
from . import datagen, evaluate, inference, trainer
from .config import ConfigError, PRESETS, load_experiment_config
from .labels import ordered_labels
from .sampler import full_combination_count

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepmetric",
        description="Assembly-progress estimation by occlusion-robust deep metric learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the seeded dataset described by a config file")
    p.add_argument("config", help="experiment config (YAML)")
    p.add_argument("--out", help="output root (default: dataset.root from the config)")
    p.add_argument("--seed", type=int, help="override dataset.seed")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("config", help="experiment config (YAML)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="apply a named training condition")
    p.add_argument("--out", default="runs/run", help="output directory for this run")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--deterministic", action="store_true",
                   help="force serial math (execution is serial already; flag kept for parity)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("checkpoint")
    p.add_argument("data_root")
    p.add_argument("--k", type=int, help="neighbors for kNN (default: value stored in the checkpoint)")
    p.add_argument("--threshold", type=float, help="fixed rejection threshold")
    p.add_argument("--sweep", help="comma-separated increasing thresholds to sweep")
    p.add_argument("--out", default=None, help="directory for reports (default: print only)")
    p.add_argument("--save-gallery", help="also write the train-split gallery to this file")
    p.add_argument("--gallery-anomalies", type=int, default=0,
                   help="optional: add this many synthesized error entries per train image to the gallery")

    p = sub.add_parser("infer", help="classify images against a saved gallery")
    p.add_argument("checkpoint")
    p.add_argument("gallery")
    p.add_argument("images", nargs="*", help="image files to classify")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("count-combinations", help="exact tuple-combination count for a dataset shape")
    p.add_argument("n", type=int, help="number of classes")
    p.add_argument("m", type=int, help="images per class")
    p.add_argument("--mode", choices=["quadruplet", "triplet"], default="quadruplet")

    return parser


def _cmd_gen_data(args) -> int:
    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["dataset.seed"] = args.seed
    cfg = load_experiment_config(args.config, overrides)
    root = args.out or cfg.dataset_root
    if not root:
        raise ConfigError(["no output root: set dataset.root in the config or pass --out"])
    try:
        manifest = datagen.generate_dataset(cfg.dataset, root)
    except OSError as exc:
        print(f"I/O failure while writing dataset under {root}: {exc}", file=sys.stderr)
        return EXIT_IO
    import yaml

    (Path(root) / "dataset_spec.yaml").write_text(
        yaml.safe_dump({"dataset": {**config_mod.dataset_spec_to_dict(cfg.dataset), "root": str(root)}}, sort_keys=True)
    )
    counts = manifest.counts()
    print(f"dataset root: {root}")
    for split in datagen.SPLITS:
        split_counts = {label: c for (s, label), c in counts.items() if s == split}
        total = sum(split_counts.values())
        print(f"  {split}: {total} images across {len(split_counts)} labels")
    digest = hashlib.sha256((Path(root) / "manifest.csv").read_bytes()).hexdigest()
    print(f"manifest: {Path(root) / 'manifest.csv'} (sha256 {digest})")
    return EXIT_OK


def _cmd_train(args) -> int:
    overrides: dict[str, object] = {}
    preset = PRESETS[args.preset] if args.preset else None
    if preset:
        overrides.update(preset.overrides)
    cli_overrides: dict[str, object] = {}
    if args.seed is not None:
        cli_overrides["train.seed"] = args.seed
    overrides.update(cli_overrides)  # command-line flags beat the preset
    cfg = load_experiment_config(args.config, overrides)
    if not cfg.dataset_root:
        raise ConfigError(["dataset.root missing: gen-data must have a target the trainer can read"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {}
    if preset:
        extra["preset"] = {"name": preset.name, "overrides": {k: v for k, v in preset.overrides.items()}}
    if cli_overrides:
        extra["cli_overrides"] = dict(cli_overrides)
    config_mod.dump_resolved(cfg, out / "config.yaml", extra=extra)

    def progress(rec):
        if not args.quiet:
            print(
                f"epoch {rec.epoch:4d}  loss {rec.loss:.4f}  val_acc {rec.val_acc:.4f}  "
                f"lambda {rec.lam:.3f}  ({rec.seconds:.1f}s)"
            )

    params, history = trainer.train(cfg.train, cfg.dataset_root, out_dir=out, progress=progress)

    manifest = datagen.load_manifest(cfg.dataset_root)
    train_images = datagen.load_split(cfg.dataset_root, manifest, "train")
    gallery = inference.build_gallery(params, train_images, metric=cfg.train.loss.distance)
    inference.save_gallery(gallery, out / "gallery.bin")

    final = history.records[-1]
    lines = [
        f"run directory: {out}",
        f"mode: {cfg.train.mode}",
        f"epochs: {cfg.train.total_epochs} (anomaly start {cfg.train.anomaly_start_epoch})",
        f"parameters: {params.param_count()}",
        f"final lambda: {final.lam!r}",
        f"final train loss: {final.loss:.6f}",
        f"final validation accuracy: {final.val_acc:.4f}",
    ]
    if preset:
        lines.append(f"preset: {preset.name} ({preset.description})")
        lines.append(f"preset overrides: {preset.overrides}")
    if cli_overrides:
        lines.append(f"command-line overrides (win over preset): {cli_overrides}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _cmd_eval(args) -> int:
    params, train_cfg = trainer.load_checkpoint(args.checkpoint)
    k = args.k if args.k is not None else train_cfg.k
    manifest = datagen.load_manifest(args.data_root)
    train_images = datagen.load_split(args.data_root, manifest, "train")
    test_images = datagen.load_split(args.data_root, manifest, "test")
    if not train_images or not test_images:
        raise ConfigError([f"dataset under {args.data_root} is missing its train or test split"])
    gallery = inference.build_gallery(params, train_images, metric=train_cfg.loss.distance)
    if args.gallery_anomalies:
        gallery = inference.add_anomaly_entries(
            gallery, params, train_images, train_cfg.erasing, args.gallery_anomalies, seed=train_cfg.seed
        )
    if args.save_gallery:
        inference.save_gallery(gallery, args.save_gallery)
    labels = ordered_labels(manifest.step_count())

    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    sweep_report = None
    threshold = args.threshold
    if args.sweep:
        thresholds = [float(t) for t in args.sweep.split(",") if t.strip()]
        sweep_report = evaluate.threshold_sweep(params, gallery, test_images, k, thresholds, labels)
        best = sweep_report.best_by_accuracy()
        threshold = best.threshold
        print(f"sweep: best threshold {best.threshold!r} with accuracy {best.accuracy:.4f}")
        if out is not None:
            sweep_report.to_csv(out / "sweep.csv")

    pairs = evaluate.predict_images(params, gallery, test_images, k=k, threshold=threshold)
    cm = evaluate.confusion_from_predictions(pairs, labels)
    summary = evaluate.summary_text(cm, threshold, extra_lines=[f"k: {k}", f"gallery size: {len(gallery)}"])
    print(summary, end="")
    if out is not None:
        cm.to_csv(out / "confusion_counts.csv", normalized=False)
        cm.to_csv(out / "confusion_normalized.csv", normalized=True)
        (out / "summary.txt").write_text(summary)
    return EXIT_OK


def _cmd_infer(args) -> int:
    params, _train_cfg = trainer.load_checkpoint(args.checkpoint)
    gallery = inference.load_gallery(args.gallery)
    print("id,predicted,mean_knn_distance,threshold_applied")
    failures = 0
    for path in args.images:
        try:
            image = datagen.load_image(path, label="", image_id=Path(path).stem)
        except (OSError, ValueError):
            print(f"{Path(path).stem},<unreadable>,nan,false")
            failures += 1
            continue
        result = inference.classify_image(params, gallery, image, k=args.k, threshold=args.threshold)
        print(f"{image.id},{result.predicted},{result.mean_knn_distance!r},{str(result.threshold_applied).lower()}")
    return EXIT_IO if failures else EXIT_OK


def _cmd_count_combinations(args) -> int:
    print(full_combination_count(args.n, args.m, args.mode))
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "count-combinations": _cmd_count_combinations,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching our config-error code.
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # runtime failures get their own exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
