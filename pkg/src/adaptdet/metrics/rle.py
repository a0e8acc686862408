"""Uncompressed COCO run-length encoding and IoU helpers.

Runs are taken in column-major order and always start with a background run
(possibly of length zero), which is the layout COCO tools expect for
``{"size": [h, w], "counts": [...]}`` records.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

RLE = dict


def encode(mask: np.ndarray) -> RLE:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def decode(rle: Mapping) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    for i, c in enumerate(rle["counts"]):
        if i % 2:
            flat[pos : pos + c] = True
        pos += c
    if pos != h * w:
        raise ValueError(f"RLE counts sum to {pos}, expected {h * w}")
    return flat.reshape((h, w), order="F")


def _intervals(rle: Mapping) -> np.ndarray:
    counts = np.asarray(rle["counts"], dtype=np.int64)
    ends = np.cumsum(counts)
    starts = ends - counts
    fg = np.arange(counts.size) % 2 == 1
    keep = fg & (counts > 0)
    return np.stack([starts[keep], ends[keep]], axis=1)


def area(rle: Mapping) -> int:
    return int(sum(rle["counts"][1::2]))


def _intersection(a: np.ndarray, b: np.ndarray) -> int:
    i = j = 0
    total = 0
    while i < len(a) and j < len(b):
        lo = max(a[i, 0], b[j, 0])
        hi = min(a[i, 1], b[j, 1])
        if hi > lo:
            total += hi - lo
        if a[i, 1] < b[j, 1]:
            i += 1
        else:
            j += 1
    return int(total)


def rle_iou(a: Mapping, b: Mapping) -> float:
    if list(a["size"]) != list(b["size"]):
        raise ValueError(f"mask sizes differ: {a['size']} vs {b['size']}")
    inter = _intersection(_intervals(a), _intervals(b))
    union = area(a) + area(b) - inter
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return inter / union


def mask_iou(a, b) -> float:
    """IoU of two masks given as dense boolean arrays or RLE dicts."""
    ra = a if isinstance(a, Mapping) else encode(a)
    rb = b if isinstance(b, Mapping) else encode(b)
    return rle_iou(ra, rb)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        raise ValueError("IoU of two empty boxes is undefined")
    return inter / union
