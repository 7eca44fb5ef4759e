"""Command line pipeline: cardiofat <subcommand> [flags].

Exit codes: 0 ok, 2 validation, 3 recognition failed, 4 i/o, 5 file format.
Errors print one machine-parsable line to stderr: ``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import arff, evaluation, forest as forest_mod, phantom as phantom_mod, registration
from .config import PipelineConfig, load_config
from .errors import CardioFatError, IoError, ValidationError
from .features import FatLabel, FeatureParams, build_dataset
from .imaging import (
    CtScan,
    LabelMask,
    SIDECAR_NAME,
    load_mask,
    load_scan,
    mask_paths,
    rescale_scan,
    save_mask,
    save_scan,
)

EXIT_CODES = {"validation": 2, "recognition-failed": 3, "io": 4, "format": 5}

REGISTRATION_FILE = "registration.json"


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise IoError(f"{what} directory not found: {path}")
    return path


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise IoError(f"{what} not found: {path}")
    return path


def _scan_dirs(root: Path) -> list[Path]:
    """A scan directory itself, or every child directory holding a sidecar."""
    if (root / SIDECAR_NAME).is_file():
        return [root]
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / SIDECAR_NAME).is_file())
    if not dirs:
        raise IoError(f"no scan directories (with {SIDECAR_NAME}) under {root}")
    return dirs


def _masks_for(scan: CtScan, masks_root: Path) -> list[LabelMask]:
    candidates = [masks_root / scan.patient_id, masks_root]
    for directory in candidates:
        if directory.is_dir():
            found = mask_paths(directory, scan.patient_id)
            if found:
                return [load_mask(path, z_index=z) for z, path in found]
    raise IoError(f"no masks for {scan.patient_id} under {masks_root}")


def _overlay(values: np.ndarray, labels: np.ndarray) -> Image.Image:
    """Grayscale base on the [-200, 500] HU display window; epicardial fat in
    pure red, mediastinal in pure green."""
    grey = np.clip((values.astype(np.float64) + 200.0) / 700.0, 0.0, 1.0)
    rgb = np.repeat((grey * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
    rgb[labels == FatLabel.EPICARDIAL] = (255, 0, 0)
    rgb[labels == FatLabel.MEDIASTINAL] = (0, 255, 0)
    return Image.fromarray(rgb, mode="RGB")


def cmd_atlas(args, config: PipelineConfig) -> int:
    patch_dir = _require_dir(Path(args.patches), "patch")
    files = sorted(patch_dir.glob("*.png"))
    if not files:
        raise IoError(f"no patch PNGs in {patch_dir}")
    patches = []
    for path in files:
        with Image.open(str(path)) as img:
            patches.append(np.asarray(img) != 0)
    atlas = registration.build_atlas(patches)
    registration.save_atlas(atlas, Path(args.out), bins=config.bins, log_base=config.log_base)
    print(f"atlas: {atlas.width}x{atlas.height} from {atlas.source_count} patches -> {args.out}")
    return 0


def cmd_register(args, config: PipelineConfig) -> int:
    scan = load_scan(_require_dir(Path(args.scan), "scan"))
    atlas, _ = registration.load_atlas(_require_file(Path(args.atlas), "atlas"))
    scan = rescale_scan(scan, config.standard_spacing)
    moved, transform = registration.register_scan(
        scan, atlas, config.target_center,
        slice_index=args.slice_index if args.slice_index is not None else config.slice_index,
        window=config.fat_window(), stride=config.search_stride,
        bins=config.bins, log_base=config.log_base,
        confirm_params=config.confirm_params(),
    )
    out = Path(args.out)
    save_scan(moved, out)
    record = {
        "patient_id": moved.patient_id,
        "dx": transform.dx,
        "dy": transform.dy,
        "scale_applied": transform.scale_applied,
        "target_center": list(config.target_center),
    }
    (out / REGISTRATION_FILE).write_text(json.dumps(record, indent=2) + "\n")
    print(f"registered {moved.patient_id}: translation ({transform.dx}, {transform.dy}) -> {out}")
    return 0


def cmd_features(args, config: PipelineConfig) -> int:
    scans_root = _require_dir(Path(args.scans), "scans")
    masks_root = _require_dir(Path(args.masks), "masks")
    scans, mask_stacks = [], []
    for scan_dir in _scan_dirs(scans_root):
        scan = load_scan(scan_dir)
        scans.append(scan)
        mask_stacks.append(_masks_for(scan, masks_root))
    params = config.feature_params()
    stride = args.stride if args.stride is not None else config.sample_stride
    dataset = build_dataset(scans, mask_stacks, params, sample_stride=stride)
    arff.write_arff(dataset, Path(args.out))
    print(f"features: {len(dataset)} rows from {len(scans)} scans -> {args.out}")
    return 0


def _feature_params_from(dataset, config: PipelineConfig) -> FeatureParams:
    keys = {"window_size", "levels", "fat_lo", "fat_hi"}
    if keys.issubset(dataset.provenance):
        return FeatureParams.from_dict(dataset.provenance)
    return config.feature_params()


def cmd_train(args, config: PipelineConfig) -> int:
    dataset = arff.read_arff(_require_file(Path(args.data), "dataset"))
    model = forest_mod.train_forest(
        dataset, n_trees=config.n_trees, k=config.k_per_split, seed=config.seed,
        target_center=config.target_center,
        feature_params=_feature_params_from(dataset, config),
        threads=config.threads,
    )
    forest_mod.save_model(model, Path(args.out))
    print(f"model: {config.n_trees} trees (k={config.k_per_split}, seed={config.seed}) "
          f"on {len(dataset)} rows -> {args.out}")
    return 0


def cmd_segment(args, config: PipelineConfig) -> int:
    scan_dir = _require_dir(Path(args.scan), "scan")
    scan = load_scan(scan_dir)
    model = forest_mod.load_model(_require_file(Path(args.model), "model"))
    registration_file = scan_dir / REGISTRATION_FILE
    scan_target = None
    if registration_file.is_file():
        record = json.loads(registration_file.read_text())
        tc = record.get("target_center")
        if tc is not None:
            scan_target = (float(tc[0]), float(tc[1]))
    masks = forest_mod.segment_scan(scan, model, scan_target_center=scan_target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for slc, mask in zip(scan.slices, masks):
        name = f"{scan.patient_id}_{mask.z_index:03d}.png"
        save_mask(mask, out / name)
        _overlay(slc.values, mask.labels).save(str(out / f"overlay_{name}"), format="PNG")
    print(f"segmented {scan.patient_id}: {len(masks)} masks -> {out}")
    return 0


def _forest_trainer(config: PipelineConfig):
    def train(dataset):
        model = forest_mod.train_forest(dataset, n_trees=config.n_trees,
                                        k=config.k_per_split, seed=config.seed,
                                        threads=config.threads)
        return lambda X: forest_mod.predict_labels(model, X)
    return train


def cmd_eval(args, config: PipelineConfig) -> int:
    dataset = arff.read_arff(_require_file(Path(args.data), "dataset"))
    if args.mode == "split66":
        train, test = evaluation.percentage_split(dataset, 0.66, seed=config.seed)
        predictor = _forest_trainer(config)(train)
        pred = predictor(test.X)
        _, metrics = evaluation.confusion_and_rates(test.y, pred, dataset.class_values)
        print(f"66% split: {len(train)} train / {len(test)} test rows")
        print(evaluation.report(metrics), end="")
    else:
        result = evaluation.cross_validate(dataset, k=10, seed=config.seed,
                                           trainer=_forest_trainer(config))
        metrics = result.pooled_metrics
        print(f"10-fold cross validation, {len(dataset)} rows (pooled)")
        print(evaluation.report(metrics), end="")
        print("per-fold mean")
        print(evaluation.report(result.mean_metrics), end="")
    if args.csv:
        Path(args.csv).write_text(evaluation.report(metrics, fmt="csv"))
    return 0


def cmd_dice(args, config: PipelineConfig) -> int:
    pred_dir = _require_dir(Path(args.pred), "prediction")
    truth_dir = _require_dir(Path(args.truth), "truth")
    pairs = []
    for pred_path in sorted(pred_dir.glob("*.png")):
        if pred_path.name.startswith("overlay_"):
            continue
        truth_path = truth_dir / pred_path.name
        if truth_path.is_file():
            pairs.append((pred_path, truth_path))
    if not pairs:
        raise IoError(f"no mask files of {pred_dir} matched in {truth_dir}")
    classes = {FatLabel.EPICARDIAL: "epicardial", FatLabel.MEDIASTINAL: "mediastinal",
               FatLabel.OTHER_FAT: "other"}
    inter = {c: 0 for c in classes}
    sizes = {c: 0 for c in classes}
    for pred_path, truth_path in pairs:
        pred_mask = load_mask(pred_path)
        truth_mask = load_mask(truth_path)
        if pred_mask.labels.shape != truth_mask.labels.shape:
            raise ValidationError(f"{pred_path.name}: mask dimensions differ")
        for c in classes:
            in_p = pred_mask.labels == c
            in_t = truth_mask.labels == c
            inter[c] += int((in_p & in_t).sum())
            sizes[c] += int(in_p.sum()) + int(in_t.sum())
    print(f"dice over {len(pairs)} mask pairs")
    for c, name in classes.items():
        value = 1.0 if sizes[c] == 0 else 2.0 * inter[c] / sizes[c]
        print(f"{name}: {value:.4f}")
    return 0


def cmd_phantom(args, config: PipelineConfig) -> int:
    if args.count < 1:
        raise ValidationError(f"count must be >= 1, got {args.count}")
    out = Path(args.out)
    for i in range(args.count):
        p = phantom_mod.generate_phantom(args.seed, i)
        phantom_mod.write_phantom(p, out)
    print(f"phantoms: {args.count} scans (seed {args.seed}) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardiofat",
                                     description="Epicardial/mediastinal fat segmentation pipeline")
    parser.add_argument("--config", metavar="FILE", help="TOML configuration file")
    parser.add_argument("--threads", type=int, metavar="N", help="worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("atlas", help="average binary patches into an atlas")
    p.add_argument("--patches", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_atlas)

    p = sub.add_parser("register", help="find the landmark and centre a scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-index", type=int, default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("features", help="extract an ARFF dataset from scans + masks")
    p.add_argument("--scans", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train the random forest on an ARFF dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="classify every fat pixel of a registered scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="66%-split or 10-fold CV on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("split66", "cv10"), default="split66")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dice", help="per-class Dice between two mask directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("phantom", help="generate a synthetic phantom corpus")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise ValidationError(f"--threads must be >= 1, got {args.threads}")
            config = replace(config, threads=args.threads)
        return args.func(args, config)
    except CardioFatError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]


if __name__ == "__main__":
    sys.exit(main())
