"""Segment-then-match object detection against a cached gallery."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from adaptdet.embedder.base import as_vector
from adaptdet.gallery import FeatureCache, GallerySet, embedder_version_of
from adaptdet.ingest import InstanceAnnotation, SceneImage, extract_patch
from adaptdet.metrics import rle as rlemod
from adaptdet.segmenter import DEFAULT_MAX_OVERLAP_IOU, DEFAULT_MIN_AREA, SegmentProposal, filter_proposals

UNKNOWN = "__unknown__"
DEFAULT_UNKNOWN_THRESHOLD = 0.5


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class MatchStrategy:
    kind: str = "closest"  # or "centroid"
    unknown_threshold: float = DEFAULT_UNKNOWN_THRESHOLD

    def __post_init__(self) -> None:
        if self.kind not in ("closest", "centroid"):
            raise ValueError(f"unknown match strategy {self.kind!r}")
        if not -1.0 <= self.unknown_threshold <= 1.0:
            raise ValueError("unknown_threshold must lie in [-1, 1]")

    @classmethod
    def closed_set(cls, kind: str = "closest") -> "MatchStrategy":
        return cls(kind, -1.0)


@dataclass(frozen=True)
class Detection:
    proposal: SegmentProposal
    matched_object_id: str
    similarity: float
    score: float

    @property
    def is_unknown(self) -> bool:
        return self.matched_object_id == UNKNOWN


def score_from_similarity(sim: float) -> float:
    return float(np.clip((sim + 1.0) / 2.0, 0.0, 1.0))


def match_patch(embedding, cache: FeatureCache, strategy: MatchStrategy = MatchStrategy()) -> tuple[str, float]:
    """Best gallery object for a unit-norm query embedding.

    Exact ties go to the lexicographically smallest object id, then the lowest
    augmentation index. Below the unknown threshold the result is ``UNKNOWN``
    but the best similarity is still returned.
    """
    q = as_vector(embedding)
    if q.shape[0] != cache.dim:
        raise ValueError(f"embedding dimension {q.shape[0]} does not match cache dimension {cache.dim}")
    if strategy.kind == "centroid":
        table, ids, aug = cache.centroids, cache.centroid_ids, np.zeros(len(cache.centroid_ids), dtype=np.int64)
    else:
        table, ids, aug = cache.embeddings, cache.entry_ids, cache.aug_index
    if len(ids) == 0:
        raise ValueError("empty feature cache")
    sims = table @ q
    best = sims.max()
    tied = np.flatnonzero(sims == best)
    winner = min(tied, key=lambda j: (ids[j], int(aug[j]), int(j)))
    sim = float(np.clip(sims[winner], -1.0, 1.0))
    if sim < strategy.unknown_threshold:
        return UNKNOWN, sim
    return ids[winner], sim


def detect(
    image: SceneImage,
    gallery: GallerySet,
    cache: FeatureCache,
    segmenter,
    embedder,
    strategy: MatchStrategy = MatchStrategy(),
    min_area: int = DEFAULT_MIN_AREA,
    max_overlap_iou: float = DEFAULT_MAX_OVERLAP_IOU,
) -> list[Detection]:
    """Segment ``image`` class-agnostically and label every proposal.

    The cache must already match the gallery and embedder (see
    :func:`adaptdet.gallery.ensure_cache`); this function never rebuilds it.
    """
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if not cache.is_valid_for(gallery, embedder_version_of(embedder)):
        raise StaleCacheError("feature cache does not match the gallery/embedder; run ensure_cache (build-gallery) first")
    proposals = filter_proposals(segmenter.segment(image), min_area=min_area, max_overlap_iou=max_overlap_iou)
    if not proposals:
        return []
    patches = [extract_patch(image, InstanceAnnotation("", p.bbox, p.mask)) for p in proposals]
    batch = getattr(embedder, "embed_query_batch", None) or getattr(embedder, "embed_batch", None)
    vectors = np.asarray(batch(patches) if batch else [embedder.embed(p) for p in patches], dtype=np.float64)
    vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    detections = []
    for proposal, vec in zip(proposals, vectors):
        object_id, sim = match_patch(vec, cache, strategy)
        detections.append(Detection(proposal, object_id, sim, score_from_similarity(sim)))
    # stable: equal scores keep proposal order
    return sorted(detections, key=lambda d: -d.score)


# ---------------------------------------------------------------------------
# line-delimited detection records


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    object_id: str
    score: float
    similarity: float
    bbox: tuple[int, int, int, int]
    rle: dict

    @classmethod
    def from_detection(cls, image_id: str, d: Detection) -> "DetectionRecord":
        return cls(image_id, d.matched_object_id, d.score, d.similarity, tuple(int(v) for v in d.proposal.bbox), rlemod.encode(d.proposal.mask))

    def to_json(self) -> str:
        payload = {
            "image_id": self.image_id,
            "object_id": self.object_id,
            "score": self.score,
            "similarity": self.similarity,
            "bbox": list(self.bbox),
            "segmentation": self.rle,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DetectionRecord":
        d = json.loads(line)
        return cls(d["image_id"], d["object_id"], float(d["score"]), float(d["similarity"]), tuple(d["bbox"]), d["segmentation"])

    def mask(self) -> np.ndarray:
        return rlemod.decode(self.rle)


def write_records(path: str | Path, records: Iterable[DetectionRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
            n += 1
    return n


def read_records(path: str | Path) -> dict[str, list[DetectionRecord]]:
    out: dict[str, list[DetectionRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = DetectionRecord.from_json(line)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from exc
            out.setdefault(r.image_id, []).append(r)
    return out


# ---------------------------------------------------------------------------
# overlays


def color_for(object_id: str) -> tuple[int, int, int]:
    """Stable per-id frame colour; unknown objects are drawn in grey."""
    if object_id == UNKNOWN:
        return (128, 128, 128)
    h = hashlib.sha256(object_id.encode()).digest()
    return (64 + h[0] % 192, 64 + h[1] % 192, 64 + h[2] % 192)


def render_overlay(image: SceneImage, detections: Sequence[Detection], thickness: int = 2) -> np.ndarray:
    out = image.pixels.copy()
    for d in detections:
        x, y, w, h = d.proposal.bbox
        c = np.asarray(color_for(d.matched_object_id), dtype=np.uint8)
        t = min(thickness, w, h)
        out[y : y + t, x : x + w] = c
        out[y + h - t : y + h, x : x + w] = c
        out[y : y + h, x : x + t] = c
        out[y : y + h, x + w - t : x + w] = c
    return out
