from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from adaptdet.ingest import ImagePatch


class EmbedderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    normalized: bool = False

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def normalize(self) -> "Embedding":
        if self.normalized:
            return self
        norm = float(np.linalg.norm(self.vector))
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError("cannot normalize a zero or non-finite embedding")
        return Embedding(self.vector / norm, True)


class Embedder(Protocol):
    version: str
    dim: int

    def embed(self, patch: ImagePatch) -> np.ndarray: ...

    def embed_batch(self, patches: Sequence[ImagePatch]) -> np.ndarray: ...


def as_vector(x) -> np.ndarray:
    return np.asarray(getattr(x, "vector", x), dtype=np.float64).ravel()


def similarity(a, b) -> float:
    """Cosine similarity of two embeddings (or raw vectors), clipped to [-1, 1]."""
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    # elementwise product then a fixed-order sum keeps the result exactly symmetric
    dot = float(np.sum(va * vb))
    return float(min(1.0, max(-1.0, dot / (na * nb))))


def letterbox(pixels: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize into a ``size x size`` black canvas, centred."""
    from PIL import Image

    h, w = pixels.shape[:2]
    scale = size / max(h, w)
    new_w = max(1, min(size, round(w * scale)))
    new_h = max(1, min(size, round(h * scale)))
    if (new_h, new_w) != (h, w):
        resized = np.asarray(Image.fromarray(pixels).resize((new_w, new_h), Image.BILINEAR))
    else:
        resized = pixels
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    top = (size - new_h) // 2
    left = (size - new_w) // 2
    canvas[top : top + new_h, left : left + new_w] = resized
    return canvas
