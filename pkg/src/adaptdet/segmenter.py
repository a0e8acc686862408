"""Class-agnostic instance segmentation backends.

Proposals deliberately carry no class field: the segmenter only says *where*
objects are, the gallery matcher decides *what* they are.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from adaptdet.ingest import BBox, SceneImage, tight_bbox

DEFAULT_MIN_AREA = 50
DEFAULT_MAX_OVERLAP_IOU = 0.9


class SegmenterError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmentProposal:
    mask: np.ndarray  # HxW bool
    bbox: BBox
    confidence: float

    @classmethod
    def from_mask(cls, mask: np.ndarray, confidence: float) -> "SegmentProposal":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask, tight_bbox(mask), float(confidence))

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


class Segmenter(Protocol):
    def segment(self, image: SceneImage) -> list[SegmentProposal]: ...


class OracleSegmenter:
    """Returns the ground-truth instance masks with confidence 1.0."""

    kind = "oracle"

    def segment(self, image: SceneImage) -> list[SegmentProposal]:
        return [SegmentProposal.from_mask(a.mask, 1.0) for a in image.annotations]


class ModelSegmenter:
    """Wraps an exported TorchScript instance-segmentation graph.

    The graph takes a ``1x3xHxW`` float tensor in [0, 1] and returns
    ``(masks, scores)`` with ``masks`` of shape ``NxHxW`` or ``Nx1xHxW``
    (probabilities or booleans) and ``scores`` of shape ``N``.
    """

    kind = "model"

    def __init__(self, checkpoint: str | Path, mask_threshold: float = 0.5):
        import torch

        path = Path(checkpoint) if checkpoint else None
        if path is None or not path.is_file():
            raise SegmenterError(f"segmentation model not found: {checkpoint}")
        try:
            self.graph = torch.jit.load(str(path), map_location="cpu").eval()
        except Exception as exc:
            raise SegmenterError(f"cannot load segmentation graph {path}: {exc}") from exc
        self.mask_threshold = mask_threshold

    def segment(self, image: SceneImage) -> list[SegmentProposal]:
        import torch

        x = torch.from_numpy(np.ascontiguousarray(image.pixels)).permute(2, 0, 1).float().div(255.0)[None]
        with torch.inference_mode():
            masks, scores = self.graph(x)
        masks = masks.float().numpy()
        if masks.ndim == 4 and masks.shape[1] == 1:  # Nx1xHxW, as Mask R-CNN emits
            masks = masks[:, 0]
        masks = masks > self.mask_threshold
        scores = scores.float().numpy()
        if masks.shape[1:] != image.pixels.shape[:2]:
            raise SegmenterError(f"model mask size {masks.shape[1:]} differs from image {image.pixels.shape[:2]}")
        return [
            SegmentProposal.from_mask(m, float(np.clip(s, 0.0, 1.0))) for m, s in zip(masks, scores) if m.any()
        ]


def make_segmenter(kind: str, checkpoint: str | None = None) -> Segmenter:
    if kind == "oracle":
        return OracleSegmenter()
    if kind == "model":
        return ModelSegmenter(checkpoint)
    raise ValueError(f"unknown segmenter backend {kind!r}")


def segment(image: SceneImage, backend: Segmenter) -> list[SegmentProposal]:
    return backend.segment(image)


def _pair_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def filter_proposals(
    proposals: Sequence[SegmentProposal],
    min_area: int = DEFAULT_MIN_AREA,
    max_overlap_iou: float = DEFAULT_MAX_OVERLAP_IOU,
) -> list[SegmentProposal]:
    """Drop tiny masks, then greedily suppress overlapping lower-confidence ones."""
    ranked = sorted(
        (p for p in proposals if p.area >= min_area), key=lambda p: -p.confidence
    )
    kept: list[SegmentProposal] = []
    for p in ranked:
        if all(_pair_iou(p.mask, k.mask) <= max_overlap_iou for k in kept):
            kept.append(p)
    return kept
