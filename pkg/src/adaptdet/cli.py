"""Command line entry point.

All commands read one YAML (or JSON) config file; command line flags override
it. Exit status is 0 on success, 2 on configuration errors (nothing is written
in that case) and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

logger = logging.getLogger("adaptdet")

COMMANDS = ("parse-dataset", "build-gallery", "train", "eval-classifier", "detect", "eval-detector", "make-toy")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    datasets: list[str] = field(default_factory=list)
    patches: str | None = None
    gallery: str | None = None
    cache: str | None = None
    detections: str | None = None
    out: str = "out"
    seed: int = 0
    segmenter: dict = field(default_factory=lambda: {"kind": "oracle", "checkpoint": None, "min_area": 50, "max_overlap_iou": 0.9})
    embedder: dict = field(default_factory=lambda: {"backbone_id": "grid-mean"})
    strategy: dict = field(default_factory=lambda: {"kind": "closest", "unknown_threshold": 0.5, "closed_set": False})
    train: dict = field(default_factory=dict)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def cache_path(self) -> Path:
        return Path(self.cache) if self.cache else self.out_dir / "gallery_cache.npz"

    @property
    def patches_path(self) -> Path:
        return Path(self.patches) if self.patches else self.out_dir / "patches"

    @property
    def detections_path(self) -> Path:
        return Path(self.detections) if self.detections else self.out_dir / "detections.jsonl"


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    cfg = RunConfig()
    known = set(asdict(cfg))
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in raw.items():
        default = getattr(cfg, key)
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            value = {**default, **value}
        elif key == "datasets" and isinstance(value, str):
            value = [value]
        setattr(cfg, key, value)
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    for name in ("gallery", "cache", "patches", "detections"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "dataset", None):
        cfg.datasets = list(args.dataset)
    if getattr(args, "segmenter", None):
        cfg.segmenter["kind"] = args.segmenter
    if getattr(args, "segmenter_checkpoint", None):
        cfg.segmenter["checkpoint"] = args.segmenter_checkpoint
    if getattr(args, "backbone", None):
        cfg.embedder["backbone_id"] = args.backbone
    if getattr(args, "checkpoint", None):
        cfg.embedder["checkpoint"] = args.checkpoint
    if getattr(args, "strategy", None):
        cfg.strategy["kind"] = args.strategy
    if getattr(args, "unknown_threshold", None) is not None:
        cfg.strategy["unknown_threshold"] = args.unknown_threshold
    if getattr(args, "closed_set", False):
        cfg.strategy["closed_set"] = True
    if getattr(args, "epochs", None) is not None:
        cfg.train["epochs"] = args.epochs
    return cfg


# ---------------------------------------------------------------------------
# validation helpers; all raise ConfigError before anything is written


def _need_datasets(cfg: RunConfig) -> None:
    if not cfg.datasets:
        raise ConfigError("no dataset paths configured (datasets / --dataset)")
    for p in cfg.datasets:
        if not Path(p).is_dir():
            raise ConfigError(f"dataset path does not exist: {p}")


def _need_gallery(cfg: RunConfig) -> None:
    if not cfg.gallery:
        raise ConfigError("no gallery path configured (gallery / --gallery)")
    if not Path(cfg.gallery).is_dir():
        raise ConfigError(f"gallery path does not exist: {cfg.gallery}")


def _embedder_config(cfg: RunConfig):
    from adaptdet.embedder import EmbedderConfig

    try:
        ec = EmbedderConfig.from_dict(dict(cfg.embedder))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad embedder config: {exc}") from exc
    if ec.backbone_id != "grid-mean" and ec.checkpoint and not Path(ec.checkpoint).is_file():
        raise ConfigError(f"embedder checkpoint does not exist: {ec.checkpoint}")
    return ec


def _strategy(cfg: RunConfig):
    from adaptdet.detector import MatchStrategy

    s = cfg.strategy
    try:
        if s.get("closed_set"):
            return MatchStrategy.closed_set(s.get("kind", "closest"))
        return MatchStrategy(s.get("kind", "closest"), float(s.get("unknown_threshold", 0.5)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad strategy config: {exc}") from exc


def _segmenter_config(cfg: RunConfig) -> dict:
    s = cfg.segmenter
    if s.get("kind") not in ("oracle", "model"):
        raise ConfigError(f"segmenter must be 'oracle' or 'model', got {s.get('kind')!r}")
    if s["kind"] == "model" and not (s.get("checkpoint") and Path(s["checkpoint"]).is_file()):
        raise ConfigError(f"model segmenter needs an existing checkpoint, got {s.get('checkpoint')!r}")
    return s


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_gallery(path: str):
    from adaptdet.gallery import load_gallery
    from adaptdet.ingest import parse_gallery_folder

    if (Path(path) / "gallery.json").is_file():
        return load_gallery(path)
    return parse_gallery_folder(path)


def _load_valid_cache(cfg: RunConfig, gallery, embedder):
    from adaptdet.detector import StaleCacheError
    from adaptdet.gallery import CacheFormatError, embedder_version_of, load_cache

    try:
        cache = load_cache(cfg.cache_path)
    except CacheFormatError as exc:
        raise StaleCacheError(f"{exc}; run `adaptdet build-gallery` first") from exc
    if not cache.is_valid_for(gallery, embedder_version_of(embedder)):
        raise StaleCacheError(
            f"feature cache {cfg.cache_path} is stale for this gallery/embedder; run `adaptdet build-gallery` first"
        )
    return cache


def _load_scenes(cfg: RunConfig):
    from adaptdet.ingest import parse_bop_dataset

    scenes = []
    for p in cfg.datasets:
        scenes.extend(parse_bop_dataset(p))
    return scenes


def _fmt_row(row: dict[str, float]) -> str:
    header = " | ".join(f"{k:>6}" for k in row)
    values = " | ".join(f"{100 * v:6.1f}" for v in row.values())
    return f"{header}\n{values}"


# ---------------------------------------------------------------------------
# commands


def cmd_parse_dataset(cfg: RunConfig) -> int:
    from adaptdet.ingest import build_classification_dataset, export_patches

    _need_datasets(cfg)
    dataset = build_classification_dataset(_load_scenes(cfg))
    counts = export_patches(dataset, cfg.patches_path)
    for object_id, n in counts.items():
        print(f"{object_id}\t{n}")
    print(f"total\t{sum(counts.values())} patches in {len(counts)} classes -> {cfg.patches_path}")
    _write_json(cfg.out_dir / "patch_counts.json", counts)
    return 0


def cmd_build_gallery(cfg: RunConfig) -> int:
    from adaptdet.embedder import load_embedder
    from adaptdet.gallery import CacheFormatError, CacheStats, ensure_cache, load_cache, save_cache, save_gallery

    _need_gallery(cfg)
    ec = _embedder_config(cfg)
    gallery = _load_gallery(cfg.gallery)
    embedder = load_embedder(ec)
    cache = None
    if cfg.cache_path.is_file():
        try:
            cache = load_cache(cfg.cache_path)
        except CacheFormatError as exc:
            logger.warning("ignoring unreadable cache: %s", exc)
    stats = CacheStats()
    cache = ensure_cache(gallery, cache, embedder, stats)
    saved_gallery = cfg.out_dir / "gallery"
    if not (saved_gallery / "gallery.json").is_file() or _load_gallery(str(saved_gallery)).content_hash != gallery.content_hash:
        save_gallery(gallery, saved_gallery)
    if stats.rebuilds:
        save_cache(cache, cfg.cache_path)
        print(f"cache rebuilt: {len(cache)} entries = 8 x {gallery.num_images} images, {len(gallery)} objects")
    else:
        print(f"cache up to date, 0 rebuilt ({len(cache)} entries = 8 x {gallery.num_images} images)")
    print(f"gallery hash {gallery.content_hash}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    from adaptdet.embedder.training import TrainConfig, train
    from adaptdet.ingest import read_patch_folder

    ec = _embedder_config(cfg)
    if ec.backbone_id == "grid-mean":
        raise ConfigError("the grid-mean embedder has no weights to train; set embedder.backbone_id")
    if not cfg.patches_path.is_dir():
        raise ConfigError(f"training patch folder does not exist: {cfg.patches_path} (run parse-dataset)")
    try:
        tc = TrainConfig(**{"seed": cfg.seed, **cfg.train})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    dataset = read_patch_folder(cfg.patches_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    result = train(dataset, tc, ec, cfg.out_dir / "checkpoint.pt", cfg.out_dir / "train_log.jsonl")
    for epoch, loss in enumerate(result.epoch_losses, 1):
        print(f"epoch {epoch}\tloss {loss:.6f}")
    print(f"checkpoint {result.checkpoint} ({result.embedder_version})")
    return 0


def cmd_eval_classifier(cfg: RunConfig) -> int:
    from adaptdet.embedder import embed, load_embedder
    from adaptdet.ingest import build_classification_dataset, read_patch_folder
    from adaptdet.metrics import cmc_evaluate, rank_queries

    _need_gallery(cfg)
    ec = _embedder_config(cfg)
    if cfg.datasets:
        _need_datasets(cfg)
    elif not cfg.patches_path.is_dir():
        raise ConfigError("eval-classifier needs query scenes (datasets) or a patch folder (patches)")
    gallery = _load_gallery(cfg.gallery)
    embedder = load_embedder(ec)
    cache = _load_valid_cache(cfg, gallery, embedder)
    queries_by_class = (
        build_classification_dataset(_load_scenes(cfg)) if cfg.datasets else read_patch_folder(cfg.patches_path)
    )
    queries, ids = [], []
    for object_id in sorted(queries_by_class):
        for n, patch in enumerate(queries_by_class[object_id]):
            queries.append((object_id, embed(patch, embedder)))
            ids.append(f"{object_id}/{n}")
    report = cmc_evaluate(rank_queries(queries, cache, ids))
    print(_fmt_row(report.row()))
    print(f"queries {report.num_queries}, excluded {report.num_excluded}")
    _write_json(
        cfg.out_dir / "classifier_report.json",
        {**report.row(), "num_queries": report.num_queries, "num_excluded": report.num_excluded, "embedder_version": embedder.version},
    )
    return 0


def cmd_detect(cfg: RunConfig) -> int:
    from adaptdet.detector import DetectionRecord, detect, render_overlay, write_records
    from adaptdet.embedder import load_embedder
    from adaptdet.ingest import write_png
    from adaptdet.segmenter import make_segmenter

    _need_datasets(cfg)
    _need_gallery(cfg)
    ec = _embedder_config(cfg)
    strategy = _strategy(cfg)
    seg_cfg = _segmenter_config(cfg)
    gallery = _load_gallery(cfg.gallery)
    embedder = load_embedder(ec)
    cache = _load_valid_cache(cfg, gallery, embedder)
    segmenter = make_segmenter(seg_cfg["kind"], seg_cfg.get("checkpoint"))
    records = []
    n_unknown = 0
    for scene in _load_scenes(cfg):
        dets = detect(
            scene, gallery, cache, segmenter, embedder, strategy,
            min_area=int(seg_cfg.get("min_area", 50)), max_overlap_iou=float(seg_cfg.get("max_overlap_iou", 0.9)),
        )
        n_unknown += sum(d.is_unknown for d in dets)
        records.extend(DetectionRecord.from_detection(scene.image_id, d) for d in dets)
        write_png(cfg.out_dir / "overlays" / f"{scene.image_id.replace('/', '_')}.png", render_overlay(scene, dets))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_records(cfg.detections_path, records)
    meta = {
        "strategy": {"kind": strategy.kind, "unknown_threshold": strategy.unknown_threshold},
        "segmenter": seg_cfg["kind"],
        "embedder_version": embedder.version,
        "gallery_hash": gallery.content_hash,
        "num_detections": len(records),
        "num_unknown": n_unknown,
    }
    _write_json(cfg.out_dir / "detect_meta.json", meta)
    print(f"{len(records)} detections ({n_unknown} unknown) -> {cfg.detections_path}")
    return 0


def cmd_eval_detector(cfg: RunConfig) -> int:
    from adaptdet.detector import read_records
    from adaptdet.metrics import coco_evaluate

    _need_datasets(cfg)
    if not cfg.detections_path.is_file():
        raise ConfigError(f"detection records not found: {cfg.detections_path} (run detect)")
    report = coco_evaluate(read_records(cfg.detections_path), _load_scenes(cfg))
    print("BBox")
    print(_fmt_row(report.bbox.row()))
    print("Seg")
    print(_fmt_row(report.segm.row()))
    _write_json(cfg.out_dir / "detector_report.json", report.to_dict())
    return 0


def cmd_make_toy(cfg: RunConfig) -> int:
    from adaptdet.synthetic import make_toy_dataset

    paths = make_toy_dataset(cfg.out_dir, seed=cfg.seed)
    print(f"gallery -> {paths['gallery']}\nscenes  -> {paths['scenes']}")
    return 0


HANDLERS = {
    "parse-dataset": cmd_parse_dataset,
    "build-gallery": cmd_build_gallery,
    "train": cmd_train,
    "eval-classifier": cmd_eval_classifier,
    "detect": cmd_detect,
    "eval-detector": cmd_eval_detector,
    "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", action="append", help="BOP scene or split folder (repeatable)")
    common.add_argument("--gallery")
    common.add_argument("--cache")
    common.add_argument("--patches")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adaptdet", description="Gallery-based open-set object detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("parse-dataset", parents=[common], help="write masked object crops per class")
    p = sub.add_parser("build-gallery", parents=[common], help="persist gallery and its feature cache")
    p.add_argument("--backbone")
    p.add_argument("--checkpoint")
    p = sub.add_parser("train", parents=[common], help="train the siamese matcher")
    p.add_argument("--backbone")
    p.add_argument("--checkpoint", help="initial weights")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("eval-classifier", parents=[common], help="CMC / mAP of gallery matching")
    p.add_argument("--backbone")
    p.add_argument("--checkpoint")
    p = sub.add_parser("detect", parents=[common], help="segment and match scenes")
    p.add_argument("--backbone")
    p.add_argument("--checkpoint")
    p.add_argument("--segmenter", choices=("oracle", "model"))
    p.add_argument("--segmenter-checkpoint")
    p.add_argument("--strategy", choices=("closest", "centroid"))
    p.add_argument("--unknown-threshold", type=float)
    p.add_argument("--closed-set", action="store_true", help="never answer unknown")
    p.add_argument("--detections", help="output records path")
    p = sub.add_parser("eval-detector", parents=[common], help="COCO box/mask metrics of detection records")
    p.add_argument("--detections")
    sub.add_parser("make-toy", parents=[common], help="write a synthetic toy gallery and scenes")
    return parser


def main(argv: list[str] | None = None) -> int:
    from adaptdet.detector import StaleCacheError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        np.random.seed(cfg.seed)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StaleCacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
