"""Exact cosine top-K retrieval over an updatable item pool."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import NumericError

__all__ = ["RetrievalIndex", "build_index", "cosine_score", "topk_retrieve", "update_item_pool"]


def cosine_score(z, q) -> float:
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz, nq = np.linalg.norm(z), np.linalg.norm(q)
    if nz == 0.0 or nq == 0.0:
        raise NumericError("cosine similarity of a zero vector")
    return float(np.clip(z @ q / (nz * nq), -1.0, 1.0))


def _normalize_rows(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("item vectors must be non-zero")
    return (v / norms[:, None]).astype(np.float32)


@dataclass
class RetrievalIndex:
    pool: np.ndarray  # (m', d) float32, unit rows
    ids: np.ndarray   # (m',) item index per row

    def __post_init__(self):
        if self.pool.shape[0] < 1:
            raise ValueError("empty item pool")
        self.row_of = {int(i): r for r, i in enumerate(self.ids)}

    @property
    def size(self) -> int:
        return self.pool.shape[0]

    @property
    def dim(self) -> int:
        return self.pool.shape[1]

    def scores(self, z) -> np.ndarray:
        """Cosine score of ``z`` against every pool row, in row order."""
        z = np.asarray(z, dtype=np.float64)
        nz = np.linalg.norm(z)
        if not np.isfinite(nz) or nz == 0.0:
            raise NumericError("query vector must be finite and non-zero")
        return self.pool @ (z / nz).astype(np.float32)


def build_index(item_vectors, ids=None) -> RetrievalIndex:
    item_vectors = np.asarray(item_vectors)
    if item_vectors.ndim != 2 or item_vectors.shape[0] == 0:
        raise ValueError("empty item pool")
    ids = np.arange(item_vectors.shape[0]) if ids is None else np.asarray(ids)
    return RetrievalIndex(_normalize_rows(item_vectors), ids.astype(np.int64))


def select_topk(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple:
    """Top ``k`` of ``scores`` by (score desc, id asc); ``-inf`` entries never returned."""
    valid = np.flatnonzero(scores > -np.inf)
    k = min(k, valid.size)
    if k == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=scores.dtype)
    s = scores[valid]
    if k < valid.size:
        kth = np.partition(s, valid.size - k)[valid.size - k]
        # everything strictly above the k-th value, plus all ties with it
        keep = s >= kth
        valid, s = valid[keep], s[keep]
    order = np.lexsort((ids[valid], -s))[:k]
    return ids[valid[order]], s[order]


def topk_retrieve(index: RetrievalIndex, z, k: int, exclude=None, with_scores: bool = False):
    """Ranked item ids by descending cosine, ties by ascending id, ``exclude`` removed."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.scores(z)
    if exclude:
        rows = [index.row_of[i] for i in exclude if i in index.row_of]
        if rows:
            scores[rows] = -np.inf
    items, s = select_topk(scores, index.ids, k)
    return (items, s) if with_scores else items


def update_item_pool(index: RetrievalIndex, new_items) -> RetrievalIndex:
    """New index with ``(id, vector)`` rows replaced or appended."""
    pool = index.pool.copy()
    extra: dict = {}  # new id -> row, last write wins
    for item_id, vec in new_items:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (index.dim,):
            raise ValueError(f"item vector must have dim {index.dim}")
        row = _normalize_rows(vec[None, :])[0]
        r = index.row_of.get(int(item_id))
        if r is not None:
            pool[r] = row
        else:
            extra[int(item_id)] = row
    ids = index.ids
    if extra:
        pool = np.vstack([pool, np.asarray(list(extra.values()), dtype=np.float32)])
        ids = np.concatenate([ids, np.fromiter(extra.keys(), dtype=np.int64, count=len(extra))])
    return RetrievalIndex(pool, np.asarray(ids, dtype=np.int64))
