"""Cumulative matching characteristics (rank-k) and re-identification mAP."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from adaptdet.embedder.base import as_vector

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass(frozen=True)
class RankingResult:
    query_id: str
    query_class: str
    gallery: tuple[tuple[str, float], ...]  # (gallery class, similarity), best first


@dataclass(frozen=True)
class CmcReport:
    mAP: float
    rank_k: dict[int, float]
    num_queries: int
    num_excluded: int = 0

    def row(self) -> dict[str, float]:
        out = {"mAP": self.mAP}
        out.update({f"R{k}": v for k, v in sorted(self.rank_k.items())})
        return out


def rank_queries(queries: Sequence[tuple[str, object]], cache, query_ids: Sequence[str] | None = None) -> list[RankingResult]:
    """Rank every cache entry (not centroids) by cosine similarity to each query.

    Ties keep cache entry order.
    """
    if not queries:
        raise ValueError("empty query set")
    gallery = np.asarray(cache.embeddings, dtype=np.float64)
    labels = cache.entry_ids
    gallery_unit = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    results = []
    for n, (query_class, emb) in enumerate(queries):
        q = as_vector(emb)
        if q.shape[0] != gallery.shape[1]:
            raise ValueError(f"query dimension {q.shape[0]} does not match cache dimension {gallery.shape[1]}")
        q = q / np.linalg.norm(q)
        sims = gallery_unit @ q
        order = np.argsort(-sims, kind="stable")
        qid = query_ids[n] if query_ids is not None else str(n)
        results.append(RankingResult(qid, str(query_class), tuple((labels[j], float(sims[j])) for j in order)))
    return results


def average_precision(hits: np.ndarray) -> float:
    """Mean of precision at each correct position of a ranked hit vector."""
    positions = np.flatnonzero(hits) + 1
    if positions.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, positions.size + 1) / positions))


def cmc_evaluate(rankings: Iterable[RankingResult], ranks: Sequence[int] = DEFAULT_RANKS) -> CmcReport:
    """Rank-k accuracy and mAP over queries whose class is present in the gallery.

    Queries whose class never appears among the ranked gallery entries are
    skipped and counted in ``num_excluded``.
    """
    first_hit = []
    aps = []
    excluded = 0
    for r in rankings:
        hits = np.fromiter((g == r.query_class for g, _ in r.gallery), dtype=bool, count=len(r.gallery))
        if not hits.any():
            excluded += 1
            continue
        first_hit.append(int(np.argmax(hits)) + 1)
        aps.append(average_precision(hits))
    if excluded:
        logger.warning("%d queries excluded: class absent from gallery", excluded)
    if not aps:
        raise ValueError("no query has its class in the gallery")
    first = np.asarray(first_hit)
    rank_k = {int(k): float(np.mean(first <= k)) for k in ranks}
    return CmcReport(float(np.mean(aps)), rank_k, len(aps), excluded)
