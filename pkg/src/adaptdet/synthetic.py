"""Toy scenes of flat coloured shapes, for tests and demos.

Eight object classes, each a distinct shape in a distinct colour. Scenes put
3-6 non-overlapping instances on a noisy grey background; gallery images show a
single instance on black. Everything is driven by a numpy ``Generator`` so a
seed pins the output exactly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from adaptdet.ingest import InstanceAnnotation, SceneImage, tight_bbox, write_png

SHAPE_CLASSES = {
    "1": ("circle", (220, 40, 40)),
    "2": ("square", (40, 190, 60)),
    "3": ("triangle", (40, 70, 220)),
    "4": ("diamond", (230, 215, 40)),
    "5": ("cross", (205, 50, 200)),
    "6": ("ring", (40, 205, 210)),
    "7": ("hexagon", (40, 120, 120)),
    "8": ("star", (235, 235, 235)),
}


def _polygon(n: int, r: float, c: float, phase: float) -> list[tuple[float, float]]:
    return [(c + r * math.cos(phase + 2 * math.pi * i / n), c + r * math.sin(phase + 2 * math.pi * i / n)) for i in range(n)]


def shape_mask(shape: str, size: int, angle: float = 0.0) -> np.ndarray:
    """Binary ``size x size`` mask of a centred shape rotated by ``angle`` radians."""
    im = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(im)
    c = (size - 1) / 2
    r = size * 0.46
    if shape == "circle":
        draw.ellipse([c - r, c - r, c + r, c + r], fill=255)
    elif shape == "ring":
        draw.ellipse([c - r, c - r, c + r, c + r], fill=255)
        draw.ellipse([c - r * 0.5, c - r * 0.5, c + r * 0.5, c + r * 0.5], fill=0)
    elif shape == "square":
        draw.polygon(_polygon(4, r, c, angle + math.pi / 4), fill=255)
    elif shape == "diamond":
        pts = [
            (c + dx * math.cos(angle) - dy * math.sin(angle), c + dx * math.sin(angle) + dy * math.cos(angle))
            for dx, dy in ((0, -r), (r * 0.55, 0), (0, r), (-r * 0.55, 0))
        ]
        draw.polygon(pts, fill=255)
    elif shape == "triangle":
        draw.polygon(_polygon(3, r, c, angle - math.pi / 2), fill=255)
    elif shape == "hexagon":
        draw.polygon(_polygon(6, r, c, angle), fill=255)
    elif shape == "star":
        pts = []
        for i in range(10):
            rr = r if i % 2 == 0 else r * 0.45
            a = angle - math.pi / 2 + math.pi * i / 5
            pts.append((c + rr * math.cos(a), c + rr * math.sin(a)))
        draw.polygon(pts, fill=255)
    elif shape == "cross":
        w = r * 0.38
        arms = [(-w, -r), (w, -r), (w, -w), (r, -w), (r, w), (w, w), (w, r), (-w, r), (-w, w), (-r, w), (-r, -w), (-w, -w)]
        pts = [(c + x * math.cos(angle) - y * math.sin(angle), c + x * math.sin(angle) + y * math.cos(angle)) for x, y in arms]
        draw.polygon(pts, fill=255)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.asarray(im) > 0


def render_object(object_id: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Colour raster and mask of one instance, with mild shading noise."""
    shape, color = SHAPE_CLASSES[object_id]
    mask = shape_mask(shape, size, float(rng.uniform(0, 2 * math.pi)))
    noise = rng.integers(-12, 13, size=(size, size, 3))
    pixels = np.clip(np.asarray(color)[None, None, :] + noise, 20, 255).astype(np.uint8)
    pixels[~mask] = 0
    return pixels, mask


def make_gallery(
    rng: np.random.Generator, ids: Sequence[str] | None = None, images_per_object: int = 3
) -> dict[str, list[np.ndarray]]:
    ids = list(ids or SHAPE_CLASSES)
    out = {}
    for object_id in ids:
        images = []
        for _ in range(images_per_object):
            pixels, mask = render_object(object_id, int(rng.integers(40, 72)), rng)
            x, y, w, h = tight_bbox(mask)
            images.append(pixels[y : y + h, x : x + w].copy())
        out[object_id] = images
    return out


def make_scene(
    image_id: str,
    rng: np.random.Generator,
    ids: Sequence[str] | None = None,
    n_objects: tuple[int, int] = (3, 6),
    height: int = 240,
    width: int = 320,
) -> SceneImage:
    ids = list(ids or SHAPE_CLASSES)
    canvas = rng.integers(60, 110, size=(height, width, 3)).astype(np.uint8)
    occupied = np.zeros((height, width), dtype=bool)
    annotations = []
    target = int(rng.integers(n_objects[0], n_objects[1] + 1))
    attempts = 0
    while len(annotations) < target and attempts < 500:
        attempts += 1
        object_id = ids[int(rng.integers(len(ids)))]
        size = int(rng.integers(36, 64))
        y0 = int(rng.integers(0, height - size))
        x0 = int(rng.integers(0, width - size))
        # keep a 2 px gap so instances never touch
        if occupied[max(0, y0 - 2) : y0 + size + 2, max(0, x0 - 2) : x0 + size + 2].any():
            continue
        pixels, mask = render_object(object_id, size, rng)
        full = np.zeros((height, width), dtype=bool)
        full[y0 : y0 + size, x0 : x0 + size] = mask
        canvas[full] = pixels[mask]
        occupied[y0 : y0 + size, x0 : x0 + size] = True
        annotations.append(InstanceAnnotation(object_id, tight_bbox(full), full))
    return SceneImage(image_id, canvas, tuple(annotations))


def write_bop_scene(scene_dir: str | Path, scenes: Sequence[SceneImage]) -> list[SceneImage]:
    """Write frames in BOP layout; returns the scenes with BOP-style image ids."""
    scene_dir = Path(scene_dir)
    gt = {}
    renamed = []
    for im_id, scene in enumerate(scenes):
        write_png(scene_dir / "rgb" / f"{im_id:06d}.png", scene.pixels)
        gt[str(im_id)] = []
        for k, ann in enumerate(scene.annotations):
            obj = int(ann.object_id) if ann.object_id.isdigit() else ann.object_id
            gt[str(im_id)].append({"obj_id": obj, "cam_R_m2c": [1, 0, 0, 0, 1, 0, 0, 0, 1], "cam_t_m2c": [0, 0, 0]})
            write_png(scene_dir / "mask_visib" / f"{im_id:06d}_{k:06d}.png", ann.mask.astype(np.uint8) * 255)
        renamed.append(SceneImage(f"{scene_dir.name}/{im_id:06d}", scene.pixels, scene.annotations))
    (scene_dir / "scene_gt.json").write_text(json.dumps(gt, indent=1), encoding="utf-8")
    return renamed


def write_gallery_folder(root: str | Path, gallery: dict[str, list[np.ndarray]]) -> None:
    root = Path(root)
    for object_id, images in gallery.items():
        for n, img in enumerate(images):
            write_png(root / object_id / f"{n:03d}.png", img)


def make_toy_dataset(
    root: str | Path, seed: int = 0, num_scenes: int = 20, images_per_object: int = 3, num_scene_dirs: int = 2
) -> dict[str, Path]:
    """Write a gallery folder and a BOP split of toy scenes under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    write_gallery_folder(root / "gallery", make_gallery(rng, images_per_object=images_per_object))
    per_dir = math.ceil(num_scenes / num_scene_dirs)
    made = 0
    for d in range(num_scene_dirs):
        n = min(per_dir, num_scenes - made)
        if n <= 0:
            break
        scenes = [make_scene(str(i), rng) for i in range(n)]
        write_bop_scene(root / "scenes" / f"{d:06d}", scenes)
        made += n
    return {"gallery": root / "gallery", "scenes": root / "scenes"}
