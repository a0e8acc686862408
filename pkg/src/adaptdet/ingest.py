"""Scene and gallery ingestion.

Scenes are read from the BOP layout used by 6D-pose datasets::

    <scene_dir>/scene_gt.json
    <scene_dir>/rgb/000000.png            (or .jpg)
    <scene_dir>/mask_visib/000000_000000.png

Every annotated instance becomes an :class:`InstanceAnnotation` whose box is
the tight box of its visible mask. Query patches are crops of that box with
everything outside the mask set to black.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

BACKGROUND = (0, 0, 0)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    """Raised for malformed or incomplete dataset folders."""


BBox = tuple[int, int, int, int]


@dataclass(frozen=True)
class InstanceAnnotation:
    object_id: str
    bbox: BBox  # x, y, w, h
    mask: np.ndarray  # HxW bool, full image raster

    def __post_init__(self) -> None:
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox must have positive size, got {self.bbox}")


@dataclass(frozen=True)
class SceneImage:
    image_id: str
    pixels: np.ndarray  # HxWx3 uint8
    annotations: tuple[InstanceAnnotation, ...] = ()

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class ImagePatch:
    pixels: np.ndarray  # hxwx3 uint8
    source_object_id: str | None = None
    source_image_id: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])


@dataclass
class _FrameRecord:
    im_id: int
    instances: list[dict] = field(default_factory=list)


def read_rgb(path: str | Path) -> np.ndarray:
    """Load an image file as an HxWx3 uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"unreadable image: {path}") from exc


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"unreadable mask: {path}") from exc
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return arr > 0


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG")


def tight_bbox(mask: np.ndarray) -> BBox:
    """Smallest (x, y, w, h) box containing every foreground pixel."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask has no foreground pixels")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return x0, y0, x1 - x0 + 1, y1 - y0 + 1


def _load_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    except OSError as exc:
        raise DatasetError(f"cannot read {path}") from exc


def _find_frame_image(scene_dir: Path, im_id: int) -> Path:
    for sub in ("rgb", "gray"):
        for suffix in IMAGE_SUFFIXES:
            candidate = scene_dir / sub / f"{im_id:06d}{suffix}"
            if candidate.is_file():
                return candidate
    raise DatasetError(f"{scene_dir}: no color image for frame {im_id}")


def parse_bop_scene(scene_dir: str | Path) -> list[SceneImage]:
    """Read one BOP scene folder into a list of frames, ordered by frame id.

    Instances whose visible mask is empty (fully occluded objects, common in
    BOP ground truth) are skipped with a log message.
    """
    scene_dir = Path(scene_dir)
    gt_path = scene_dir / "scene_gt.json"
    if not gt_path.is_file():
        raise DatasetError(f"{scene_dir}: missing scene_gt.json")
    raw = _load_json(gt_path)
    if not isinstance(raw, dict):
        raise DatasetError(f"malformed JSON in {gt_path}: expected an object keyed by frame id")

    frames = []
    for key, instances in raw.items():
        try:
            im_id = int(key)
        except ValueError as exc:
            raise DatasetError(f"malformed JSON in {gt_path}: frame key {key!r}") from exc
        if not isinstance(instances, list):
            raise DatasetError(f"malformed JSON in {gt_path}: frame {key} is not a list")
        frames.append(_FrameRecord(im_id, instances))
    frames.sort(key=lambda f: f.im_id)

    scenes = []
    for frame in frames:
        pixels = read_rgb(_find_frame_image(scene_dir, frame.im_id))
        annotations = []
        for idx, inst in enumerate(frame.instances):
            if "obj_id" not in inst:
                raise DatasetError(f"malformed JSON in {gt_path}: frame {frame.im_id} instance {idx} lacks obj_id")
            mask_path = scene_dir / "mask_visib" / f"{frame.im_id:06d}_{idx:06d}.png"
            if not mask_path.is_file():
                raise DatasetError(
                    f"{scene_dir}: missing visible mask for frame {frame.im_id} instance {idx} ({mask_path.name})"
                )
            mask = read_mask(mask_path)
            if mask.shape != pixels.shape[:2]:
                raise DatasetError(f"{mask_path}: mask size {mask.shape} differs from image {pixels.shape[:2]}")
            if not mask.any():
                logger.info("skipping fully occluded instance %d in frame %d of %s", idx, frame.im_id, scene_dir)
                continue
            annotations.append(InstanceAnnotation(str(inst["obj_id"]), tight_bbox(mask), mask))
        scenes.append(SceneImage(f"{scene_dir.name}/{frame.im_id:06d}", pixels, tuple(annotations)))
    return scenes


def parse_bop_dataset(root: str | Path) -> list[SceneImage]:
    """Parse a single scene folder, or every scene folder below a split folder."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset path is not a directory: {root}")
    if (root / "scene_gt.json").is_file():
        return parse_bop_scene(root)
    scene_dirs = sorted(p for p in root.iterdir() if (p / "scene_gt.json").is_file())
    if not scene_dirs:
        raise DatasetError(f"{root}: no BOP scene folders found")
    out: list[SceneImage] = []
    for scene_dir in scene_dirs:
        out.extend(parse_bop_scene(scene_dir))
    return out


def extract_patch(image: SceneImage, annotation: InstanceAnnotation) -> ImagePatch:
    """Crop the annotation box and black out everything outside the mask."""
    x, y, w, h = annotation.bbox
    if x < 0 or y < 0 or x + w > image.width or y + h > image.height:
        raise ValueError(f"bbox {annotation.bbox} exceeds image of size {image.width}x{image.height}")
    crop_mask = np.asarray(annotation.mask[y : y + h, x : x + w], dtype=bool)
    if not crop_mask.any():
        raise ValueError(f"annotation of object {annotation.object_id} has an empty mask inside its box")
    pixels = np.zeros((h, w, 3), dtype=np.uint8)
    pixels[crop_mask] = image.pixels[y : y + h, x : x + w][crop_mask]
    return ImagePatch(pixels, annotation.object_id, image.image_id)


def build_classification_dataset(scenes: Iterable[SceneImage]) -> dict[str, list[ImagePatch]]:
    """Group masked crops of every annotation by object id."""
    grouped: dict[str, list[ImagePatch]] = defaultdict(list)
    for scene in scenes:
        for ann in scene.annotations:
            grouped[ann.object_id].append(extract_patch(scene, ann))
    return dict(grouped)


def export_patches(dataset: dict[str, list[ImagePatch]], out_dir: str | Path) -> dict[str, int]:
    """Write ``out_dir/<object_id>/<n>.png`` and return per-class counts."""
    out_dir = Path(out_dir)
    counts = {}
    for object_id in sorted(dataset):
        for n, patch in enumerate(dataset[object_id]):
            write_png(out_dir / object_id / f"{n:06d}.png", patch.pixels)
        counts[object_id] = len(dataset[object_id])
    return counts


def list_images(folder: Path) -> list[Path]:
    return sorted(
        (p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def read_patch_folder(root: str | Path) -> dict[str, list[ImagePatch]]:
    """Read a ``root/<object_id>/<image>`` tree into patches grouped by id."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    out: dict[str, list[ImagePatch]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = list_images(sub)
        if not files:
            raise DatasetError(f"empty gallery object: {sub.name} ({sub})")
        out[sub.name] = [ImagePatch(read_rgb(f), sub.name, str(f.relative_to(root))) for f in files]
    return out


def parse_gallery_folder(root: str | Path):
    """Load ``root/<object_id>/<image>`` into a :class:`~adaptdet.gallery.GallerySet`.

    Images are read in lexicographic filename order so the content hash is
    reproducible.
    """
    from adaptdet.gallery import GallerySet

    objects = read_patch_folder(root)
    if not objects:
        raise DatasetError(f"{root}: no object sub-directories")
    return GallerySet.from_images(objects)
