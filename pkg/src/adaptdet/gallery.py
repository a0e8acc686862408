"""Gallery set lifecycle and the buffered gallery feature cache.

A :class:`GallerySet` is immutable; ``add_object``/``remove_object``/``subset``
return new sets. Each gallery image is expanded into eight rotations (multiples
of 45 degrees) and embedded once. The resulting :class:`FeatureCache` remembers
the content hash of the gallery and the embedder version it was built with, and
:func:`ensure_cache` only rebuilds it when either of them changes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from adaptdet.ingest import DatasetError, ImagePatch, read_rgb, write_png

logger = logging.getLogger(__name__)

NUM_ROTATIONS = 8
GALLERY_FORMAT_VERSION = 1
CACHE_FORMAT_VERSION = 1
_NORM_EPS = 1e-12


class GalleryError(ValueError):
    pass


class CacheBuildError(RuntimeError):
    def __init__(self, object_id: str, image_index: int, cause: BaseException):
        super().__init__(f"embedding failed for object {object_id!r}, image {image_index}: {cause}")
        self.object_id = object_id
        self.image_index = image_index


class CacheFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# augmentation


def _rotate_45(pixels: np.ndarray) -> np.ndarray:
    """Counter-clockwise 45 degree rotation onto the tight enclosing canvas."""
    h, w = pixels.shape[:2]
    c = s = math.sqrt(0.5)
    out_w = math.ceil(w * c + h * s - 1e-9)
    out_h = math.ceil(w * s + h * c - 1e-9)
    # inverse map: output pixel centre -> input pixel centre
    v, u = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    du = u + 0.5 - out_w / 2.0
    dv = v + 0.5 - out_h / 2.0
    src_x = c * du - s * dv + w / 2.0 - 0.5
    src_y = s * du + c * dv + h / 2.0 - 0.5
    out = np.empty((out_h, out_w, pixels.shape[2]), dtype=np.uint8)
    for ch in range(pixels.shape[2]):
        sampled = ndimage.map_coordinates(
            pixels[..., ch].astype(np.float64), [src_y, src_x], order=1, mode="constant", cval=0.0
        )
        out[..., ch] = np.clip(np.rint(sampled), 0, 255).astype(np.uint8)
    return out


def rotate_pixels(pixels: np.ndarray, k: int) -> np.ndarray:
    """Rotate by ``k * 45`` degrees counter-clockwise, expanding the canvas."""
    k %= NUM_ROTATIONS
    if k % 2:
        pixels = _rotate_45(pixels)
    return np.ascontiguousarray(np.rot90(pixels, k // 2))


def augment(patch: ImagePatch) -> list[ImagePatch]:
    """The eight rotations of ``patch``; element 0 is the patch itself."""
    out = [patch]
    for k in range(1, NUM_ROTATIONS):
        out.append(ImagePatch(rotate_pixels(patch.pixels, k), patch.source_object_id, patch.source_image_id))
    return out


# ---------------------------------------------------------------------------
# gallery set


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.uint8, copy=True)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise GalleryError(f"gallery images must be HxWx3, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GalleryObject:
    object_id: str
    images: tuple[ImagePatch, ...]
    digest: str = field(init=False, compare=False)

    def __post_init__(self) -> None:
        if not self.images:
            raise GalleryError(f"empty gallery object: {self.object_id}")
        frozen = tuple(
            ImagePatch(_freeze(p.pixels), self.object_id, p.source_image_id) for p in self.images
        )
        object.__setattr__(self, "images", frozen)
        h = hashlib.sha256()
        h.update(self.object_id.encode("utf-8") + b"\0")
        for p in frozen:
            h.update(np.asarray(p.pixels.shape, dtype="<u4").tobytes())
            h.update(p.pixels.tobytes())
        object.__setattr__(self, "digest", h.hexdigest())


@dataclass(frozen=True)
class GallerySet:
    objects: Mapping[str, GalleryObject]
    content_hash: str = field(init=False, compare=False)

    def __post_init__(self) -> None:
        ordered = {k: self.objects[k] for k in sorted(self.objects)}
        for key, obj in ordered.items():
            if key != obj.object_id:
                raise GalleryError(f"object key {key!r} does not match object id {obj.object_id!r}")
        object.__setattr__(self, "objects", MappingProxyType(ordered))
        h = hashlib.sha256()
        for key, obj in ordered.items():
            h.update(key.encode("utf-8") + b"\0" + obj.digest.encode("ascii"))
        object.__setattr__(self, "content_hash", h.hexdigest())

    @classmethod
    def from_images(cls, images: Mapping[str, Sequence[ImagePatch | np.ndarray]]) -> "GallerySet":
        objects = {}
        for object_id, imgs in images.items():
            patches = tuple(p if isinstance(p, ImagePatch) else ImagePatch(p) for p in imgs)
            objects[object_id] = GalleryObject(object_id, patches)
        return cls(objects)

    @property
    def ids(self) -> list[str]:
        return list(self.objects)

    @property
    def num_images(self) -> int:
        return sum(len(o.images) for o in self.objects.values())

    def __len__(self) -> int:
        return len(self.objects)

    def __contains__(self, object_id: object) -> bool:
        return object_id in self.objects


def add_object(gallery: GallerySet, object_id: str, images: Sequence[ImagePatch | np.ndarray]) -> GallerySet:
    if object_id in gallery:
        raise GalleryError(f"object {object_id!r} already in gallery")
    patches = tuple(p if isinstance(p, ImagePatch) else ImagePatch(p) for p in images)
    return GallerySet({**gallery.objects, object_id: GalleryObject(object_id, patches)})


def remove_object(gallery: GallerySet, object_id: str) -> GallerySet:
    if object_id not in gallery:
        raise GalleryError(f"object {object_id!r} not in gallery")
    return GallerySet({k: v for k, v in gallery.objects.items() if k != object_id})


def replace_object(gallery: GallerySet, object_id: str, images: Sequence[ImagePatch | np.ndarray]) -> GallerySet:
    return add_object(remove_object(gallery, object_id), object_id, images)


def subset(gallery: GallerySet, ids: Iterable[str]) -> GallerySet:
    """Candidate subset of a larger gallery; objects are shared, not copied."""
    ids = list(ids)
    missing = [i for i in ids if i not in gallery]
    if missing:
        raise GalleryError(f"ids not in gallery: {missing}")
    return GallerySet({i: gallery.objects[i] for i in ids})


# ---------------------------------------------------------------------------
# feature cache


@dataclass(frozen=True)
class FeatureCache:
    built_from_hash: str
    embedder_version: str
    entry_ids: tuple[str, ...]
    image_index: np.ndarray  # (N,) int
    aug_index: np.ndarray  # (N,) int
    embeddings: np.ndarray  # (N, D) float64, unit rows
    centroid_ids: tuple[str, ...]
    centroids: np.ndarray  # (K, D) float64, unit rows
    object_hashes: Mapping[str, str]

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def __len__(self) -> int:
        return len(self.entry_ids)

    @property
    def entries(self) -> list[tuple[str, int, np.ndarray]]:
        return [(i, int(a), e) for i, a, e in zip(self.entry_ids, self.aug_index, self.embeddings)]

    def centroid(self, object_id: str) -> np.ndarray:
        return self.centroids[self.centroid_ids.index(object_id)]

    def is_valid_for(self, gallery: GallerySet, embedder_version: str | None = None) -> bool:
        if self.built_from_hash != gallery.content_hash:
            return False
        return embedder_version is None or embedder_version == self.embedder_version


@dataclass
class CacheStats:
    rebuilds: int = 0


def embedder_version_of(embedder) -> str:
    return str(getattr(embedder, "version", type(embedder).__name__))


def _embed_all(embedder, patches: list[ImagePatch]) -> np.ndarray:
    batch = getattr(embedder, "embed_batch", None)
    if batch is not None:
        out = batch(patches)
    else:
        fn = getattr(embedder, "embed", embedder)
        out = [fn(p) for p in patches]
    return np.asarray([np.asarray(getattr(v, "vector", v), dtype=np.float64).ravel() for v in out])


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < _NORM_EPS):
        raise ValueError("zero-norm embedding")
    return m / norms


def build_cache(gallery: GallerySet, embedder) -> FeatureCache:
    """Embed all eight rotations of every gallery image.

    Entries are ordered by object id, then image index, then rotation index.
    """
    if len(gallery) == 0:
        raise GalleryError("cannot build a feature cache for an empty gallery")
    entry_ids: list[str] = []
    image_index: list[int] = []
    aug_index: list[int] = []
    blocks = []
    centroids = []
    for object_id, obj in gallery.objects.items():
        rows = []
        for i, img in enumerate(obj.images):
            try:
                vecs = _normalize_rows(_embed_all(embedder, augment(img)))
            except Exception as exc:
                raise CacheBuildError(object_id, i, exc) from exc
            if blocks and vecs.shape[1] != blocks[0].shape[1]:
                raise CacheBuildError(object_id, i, ValueError("embedding dimension changed"))
            rows.append(vecs)
            entry_ids.extend([object_id] * NUM_ROTATIONS)
            image_index.extend([i] * NUM_ROTATIONS)
            aug_index.extend(range(NUM_ROTATIONS))
        obj_block = np.concatenate(rows, axis=0)
        blocks.append(obj_block)
        mean = obj_block.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < _NORM_EPS:
            raise CacheBuildError(object_id, -1, ValueError("gallery embeddings cancel to a zero centroid"))
        centroids.append(mean / norm)
    cache = FeatureCache(
        built_from_hash=gallery.content_hash,
        embedder_version=embedder_version_of(embedder),
        entry_ids=tuple(entry_ids),
        image_index=np.asarray(image_index, dtype=np.int64),
        aug_index=np.asarray(aug_index, dtype=np.int64),
        embeddings=np.concatenate(blocks, axis=0),
        centroid_ids=tuple(gallery.objects),
        centroids=np.asarray(centroids),
        object_hashes=MappingProxyType({k: o.digest for k, o in gallery.objects.items()}),
    )
    logger.info("built feature cache: %d entries, %d objects", len(cache), len(cache.centroid_ids))
    return cache


def ensure_cache(
    gallery: GallerySet,
    cache: FeatureCache | None,
    embedder,
    stats: CacheStats | None = None,
) -> FeatureCache:
    """Return ``cache`` if it still matches ``gallery`` and ``embedder``, else rebuild."""
    if cache is not None and cache.is_valid_for(gallery, embedder_version_of(embedder)):
        return cache
    rebuilt = build_cache(gallery, embedder)
    if stats is not None:
        stats.rebuilds += 1
    return rebuilt


def restrict_cache(cache: FeatureCache, gallery_subset: GallerySet) -> FeatureCache:
    """Cut a cache down to a candidate subset without re-embedding.

    Only valid when every object of the subset is byte-identical to the one the
    cache was built from.
    """
    for object_id, obj in gallery_subset.objects.items():
        if cache.object_hashes.get(object_id) != obj.digest:
            raise GalleryError(f"object {object_id!r} differs from the cached version; rebuild instead")
    keep_ids = set(gallery_subset.ids)
    rows = np.asarray([i in keep_ids for i in cache.entry_ids], dtype=bool)
    cents = [cache.centroid_ids.index(i) for i in gallery_subset.ids]
    return FeatureCache(
        built_from_hash=gallery_subset.content_hash,
        embedder_version=cache.embedder_version,
        entry_ids=tuple(i for i, k in zip(cache.entry_ids, rows) if k),
        image_index=cache.image_index[rows],
        aug_index=cache.aug_index[rows],
        embeddings=cache.embeddings[rows],
        centroid_ids=tuple(gallery_subset.ids),
        centroids=cache.centroids[cents],
        object_hashes=MappingProxyType({i: cache.object_hashes[i] for i in gallery_subset.ids}),
    )


# ---------------------------------------------------------------------------
# persistence


def _atomic_target(path: Path) -> tuple[int, str]:
    path.parent.mkdir(parents=True, exist_ok=True)
    return tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")


def save_gallery(gallery: GallerySet, path: str | Path) -> None:
    """Write the gallery as a folder tree plus ``gallery.json`` manifest.

    The tree is itself a valid gallery folder for :func:`parse_gallery_folder`.
    """
    path = Path(path)
    manifest = {"format_version": GALLERY_FORMAT_VERSION, "content_hash": gallery.content_hash, "objects": {}}
    for object_id, obj in gallery.objects.items():
        if not object_id or os.sep in object_id or object_id in (".", ".."):
            raise GalleryError(f"object id {object_id!r} cannot be used as a folder name")
        names = []
        for n, img in enumerate(obj.images):
            name = f"{n:04d}.png"
            write_png(path / object_id / name, img.pixels)
            names.append(name)
        manifest["objects"][object_id] = names
    fd, tmp = _atomic_target(path / "gallery.json")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, path / "gallery.json")


def load_gallery(path: str | Path) -> GallerySet:
    path = Path(path)
    try:
        manifest = json.loads((path / "gallery.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CacheFormatError(f"cannot read gallery manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != GALLERY_FORMAT_VERSION:
        raise CacheFormatError(f"unsupported gallery format version {manifest.get('format_version')!r}")
    try:
        images = {
            object_id: [ImagePatch(read_rgb(path / object_id / name), object_id, name) for name in names]
            for object_id, names in manifest["objects"].items()
        }
    except DatasetError as exc:
        raise CacheFormatError(str(exc)) from exc
    gallery = GallerySet.from_images(images)
    if gallery.content_hash != manifest.get("content_hash"):
        raise CacheFormatError(f"gallery in {path} does not match its manifest hash")
    return gallery


def save_cache(cache: FeatureCache, path: str | Path) -> None:
    path = Path(path)
    hash_ids = sorted(cache.object_hashes)
    arrays = {
        "format_version": np.asarray(CACHE_FORMAT_VERSION, dtype=np.int64),
        "dim": np.asarray(cache.dim, dtype=np.int64),
        "built_from_hash": np.asarray(cache.built_from_hash),
        "embedder_version": np.asarray(cache.embedder_version),
        "entry_ids": np.asarray(cache.entry_ids, dtype=str),
        "image_index": cache.image_index,
        "aug_index": cache.aug_index,
        "embeddings": cache.embeddings,
        "centroid_ids": np.asarray(cache.centroid_ids, dtype=str),
        "centroids": cache.centroids,
        "object_hash_ids": np.asarray(hash_ids, dtype=str),
        "object_hash_values": np.asarray([cache.object_hashes[i] for i in hash_ids], dtype=str),
    }
    fd, tmp = _atomic_target(path)
    with os.fdopen(fd, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_cache(path: str | Path) -> FeatureCache:
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CACHE_FORMAT_VERSION:
                raise CacheFormatError(f"unsupported cache format version {version}")
            embeddings = np.asarray(data["embeddings"], dtype=np.float64)
            if embeddings.ndim != 2 or embeddings.shape[1] != int(data["dim"]):
                raise CacheFormatError(f"{path}: embedding table does not match stored dimension")
            cache = FeatureCache(
                built_from_hash=str(data["built_from_hash"]),
                embedder_version=str(data["embedder_version"]),
                entry_ids=tuple(str(s) for s in data["entry_ids"]),
                image_index=np.asarray(data["image_index"], dtype=np.int64),
                aug_index=np.asarray(data["aug_index"], dtype=np.int64),
                embeddings=embeddings,
                centroid_ids=tuple(str(s) for s in data["centroid_ids"]),
                centroids=np.asarray(data["centroids"], dtype=np.float64),
                object_hashes=MappingProxyType(
                    dict(zip((str(s) for s in data["object_hash_ids"]), (str(s) for s in data["object_hash_values"])))
                ),
            )
    except CacheFormatError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CacheFormatError(f"corrupt or unreadable cache file {path}: {exc}") from exc
    if len(cache.entry_ids) != embeddings.shape[0]:
        raise CacheFormatError(f"{path}: entry table length mismatch")
    return cache
