"""Deterministic, weight-free embedder used for pipeline tests and demos."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from adaptdet.ingest import ImagePatch


def _area_weights(n: int, cells: int) -> np.ndarray:
    """(cells, n) matrix averaging ``n`` unit pixels into ``cells`` equal bins."""
    edges = np.arange(cells + 1) * (n / cells)
    lo = np.arange(n)[None, :]
    overlap = np.clip(np.minimum(lo + 1, edges[1:, None]) - np.maximum(lo, edges[:-1, None]), 0.0, None)
    return overlap / (n / cells)


class GridMeanEmbedder:
    """Per-cell, per-channel colour means on a ``grid x grid`` layout.

    The patch is first padded (black, centred) to a square so the aspect ratio
    is kept, then each cell's mean is taken with exact fractional-area
    weighting. With the default 8x8 grid the output has 192 dimensions.
    """

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dim = grid * grid * 3
        self.version = f"grid-mean/{grid}x{grid}/v1"

    def embed(self, patch: ImagePatch | np.ndarray) -> np.ndarray:
        pixels = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64) / 255.0
        h, w = pixels.shape[:2]
        side = max(h, w)
        square = np.zeros((side, side, 3))
        top, left = (side - h) // 2, (side - w) // 2
        square[top : top + h, left : left + w] = pixels
        wy = _area_weights(side, self.grid)
        cells = np.einsum("iy,yxc,jx->ijc", wy, square, wy)
        return cells.reshape(-1)

    def embed_batch(self, patches: Sequence[ImagePatch]) -> np.ndarray:
        return np.stack([self.embed(p) for p in patches])
