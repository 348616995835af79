"""Collaborative embeddings: MF-BPR and LightGCN.

LightGCN propagation is linear in the base (layer-0) embeddings, so its
backward pass is the same propagation applied to the output gradient
(the normalized adjacency is symmetric).  MF-BPR is the zero-layer case.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .data import DatasetSplit
from .diffcore import AdamW, TrainingError

__all__ = [
    "TrainingError",
    "EmbeddingTable",
    "BipartiteGraph",
    "CfTrainConfig",
    "build_graph",
    "propagate_lightgcn",
    "bpr_loss",
    "train_cf",
    "extend_for_new_entities",
    "validation_hit_ratio",
]

log = logging.getLogger(__name__)


@dataclass
class EmbeddingTable:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    # layer-0 embeddings the table was propagated from; used for warm starts
    base_users: np.ndarray | None = None
    base_items: np.ndarray | None = None

    def __post_init__(self):
        if self.user_vectors.ndim != 2 or self.item_vectors.ndim != 2:
            raise ValueError("embedding tables must be 2-D")
        if self.user_vectors.shape[1] != self.item_vectors.shape[1] or self.user_vectors.shape[1] < 1:
            raise ValueError("user and item vectors must share a positive dimension")

    @property
    def dim(self) -> int:
        return self.user_vectors.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_vectors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_vectors.shape[0]


@dataclass
class BipartiteGraph:
    n_users: int
    n_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    user_degree: np.ndarray
    item_degree: np.ndarray
    coef: np.ndarray

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric normalized adjacency over ``n_users + n_items`` nodes."""
        n = self.n_users + self.n_items
        rows = np.concatenate([self.edge_users, self.n_users + self.edge_items])
        cols = np.concatenate([self.n_users + self.edge_items, self.edge_users])
        vals = np.concatenate([self.coef, self.coef])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass
class CfTrainConfig:
    method: str = "lightgcn"
    layers: int = 3
    dim: int = 64
    epochs: int = 200
    batch_size: int = 2048
    lr: float = 1e-3
    l2: float = 1e-4
    seed: int = 0
    eval_every: int = 10
    patience: int = 5
    init_std: float = 0.1

    def __post_init__(self):
        if self.method not in ("lightgcn", "mf_bpr"):
            raise ValueError(f"unknown CF method {self.method!r}")
        if self.layers < 0 or self.dim < 1:
            raise ValueError("layers must be >= 0 and dim >= 1")

    @property
    def n_layers(self) -> int:
        return self.layers if self.method == "lightgcn" else 0


def build_graph(split: DatasetSplit) -> BipartiteGraph:
    users, items = [], []
    for u, hist in enumerate(split.train):
        users.extend([u] * len(hist))
        items.extend(hist)
    if not users:
        raise ValueError("cannot build a graph from an empty training split")
    eu = np.asarray(users, dtype=np.int64)
    ei = np.asarray(items, dtype=np.int64)
    du = np.bincount(eu, minlength=split.n_users).astype(np.float64)
    di = np.bincount(ei, minlength=split.n_items).astype(np.float64)
    coef = 1.0 / np.sqrt(du[eu] * di[ei])
    return BipartiteGraph(split.n_users, split.n_items, eu, ei, du, di, coef)


def _propagate(adj, e0: np.ndarray, layers: int) -> np.ndarray:
    acc = e0.copy()
    cur = e0
    for _ in range(layers):
        cur = adj @ cur
        acc += cur
    return acc / (layers + 1)


def propagate_lightgcn(g: BipartiteGraph, e0: EmbeddingTable, layers: int) -> EmbeddingTable:
    """Layer-mean of ``layers`` rounds of normalized neighbor averaging."""
    if layers < 0:
        raise ValueError("layers must be >= 0")
    stacked = np.vstack([e0.user_vectors, e0.item_vectors])
    out = _propagate(g.adjacency(), stacked, layers) if layers else stacked.copy()
    return EmbeddingTable(out[:g.n_users], out[g.n_users:],
                          e0.user_vectors.copy(), e0.item_vectors.copy())


def bpr_loss(gap):
    """``-ln sigmoid(gap)``, evaluated stably."""
    return np.logaddexp(0.0, -np.asarray(gap, dtype=np.float64))


def _sample_triples(split: DatasetSplit, rng: np.random.Generator):
    users, pos = [], []
    for u, hist in enumerate(split.train):
        users.extend([u] * len(hist))
        pos.extend(hist)
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    train_sets = [set(h) for h in split.train]
    neg = rng.integers(0, split.n_items, size=users.size)
    # resample collisions until every negative is un-interacted
    bad = np.fromiter((neg[i] in train_sets[users[i]] for i in range(users.size)), bool, users.size)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, split.n_items, size=idx.size)
        bad[idx] = [neg[i] in train_sets[users[i]] for i in idx]
    return users, pos, neg


def validation_hit_ratio(split: DatasetSplit, users_vec, items_vec, k: int = 20,
                         which: str = "validation", chunk: int = 1024) -> float | None:
    """HR@k of inner-product ranking with train items excluded."""
    targets = split.validation if which == "validation" else split.test
    us = [u for u in range(split.n_users) if targets[u] is not None and u not in split.unseen_users]
    if not us:
        return None
    hits = 0
    for start in range(0, len(us), chunk):
        batch = us[start:start + chunk]
        scores = users_vec[batch] @ items_vec.T
        for row, u in enumerate(batch):
            if split.train[u]:
                scores[row, split.train[u]] = -np.inf
        truth = np.array([targets[u] for u in batch])
        tscore = scores[np.arange(len(batch)), truth]
        # rank = 1 + #items scoring strictly higher + ties at lower index
        higher = (scores > tscore[:, None]).sum(axis=1)
        ties = np.array([(scores[r, :truth[r]] == tscore[r]).sum() for r in range(len(batch))])
        hits += int(((higher + ties) < k).sum())
    return hits / len(us)


def _scatter_rows(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Dense ``out`` with ``out[idx[i]] += vals[i]`` (duplicates accumulate)."""
    sel = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n_rows, idx.size))
    return sel @ vals


def _train(split: DatasetSplit, cfg: CfTrainConfig, base: np.ndarray,
           epochs: int, rng: np.random.Generator) -> np.ndarray:
    n = split.n_users
    graph = build_graph(split)
    adj = graph.adjacency() if cfg.n_layers else None
    params = {"E": base}
    opt = AdamW(params, lr=cfg.lr, weight_decay=0.0)
    best = (-1.0, base.copy())
    bad_evals = 0
    for epoch in range(epochs):
        users, pos, neg = _sample_triples(split, rng)
        order = rng.permutation(users.size)
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            bu, bp, bn = users[b], pos[b], neg[b] + n
            bp = bp + n
            E = params["E"]
            final = _propagate(adj, E, cfg.n_layers) if cfg.n_layers else E
            eu, ep, en = final[bu], final[bp], final[bn]
            gap = np.einsum("ij,ij->i", eu, ep - en)
            sig = 1.0 / (1.0 + np.exp(np.clip(gap, -60, 60)))  # = sigmoid(-gap)
            bsz = b.size
            reg = 0.5 * (np.sum(E[bu] ** 2) + np.sum(E[bp] ** 2) + np.sum(E[bn] ** 2)) / bsz
            loss = float(np.mean(bpr_loss(gap)) + cfg.l2 * reg)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite BPR loss at epoch {epoch}")
            total += loss * bsz
            coeff = (-sig / bsz)[:, None]
            idx = np.concatenate([bu, bp, bn])
            gfinal = _scatter_rows(E.shape[0], idx, np.vstack([coeff * (ep - en), coeff * eu, -coeff * eu]))
            grad = _propagate(adj, gfinal, cfg.n_layers) if cfg.n_layers else gfinal
            greg = _scatter_rows(E.shape[0], idx, E[idx])
            opt.step({"E": grad + (cfg.l2 / bsz) * greg})
        log.debug("cf epoch %d loss %.5f", epoch, total / users.size)
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and any(v is not None for v in split.validation):
            final = _propagate(adj, params["E"], cfg.n_layers) if cfg.n_layers else params["E"]
            hr = validation_hit_ratio(split, final[:n], final[n:])
            log.info("cf epoch %d val HR@20 %.4f", epoch + 1, hr)
            if hr > best[0]:
                best = (hr, params["E"].copy())
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    log.info("cf early stop at epoch %d", epoch + 1)
                    break
    if best[0] >= 0:
        return best[1]
    return params["E"]


def _finish(split: DatasetSplit, cfg: CfTrainConfig, E: np.ndarray) -> EmbeddingTable:
    E = E.astype(np.float32).astype(np.float64)
    n = split.n_users
    table = EmbeddingTable(E[:n].copy(), E[n:].copy())
    if cfg.n_layers:
        table = propagate_lightgcn(build_graph(split), table, cfg.n_layers)
    else:
        table.base_users, table.base_items = table.user_vectors.copy(), table.item_vectors.copy()
    # serving precision, so persisted tables reload bit-identically
    table.user_vectors = table.user_vectors.astype(np.float32).astype(np.float64)
    table.item_vectors = table.item_vectors.astype(np.float32).astype(np.float64)
    return table


def train_cf(split: DatasetSplit, cfg: CfTrainConfig) -> EmbeddingTable:
    """BPR training of MF or LightGCN embeddings; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    base = rng.normal(0.0, cfg.init_std, size=(split.n_users + split.n_items, cfg.dim))
    E = _train(split, cfg, base, cfg.epochs, rng)
    return _finish(split, cfg, E)


def extend_for_new_entities(old: EmbeddingTable, new_split: DatasetSplit,
                            cfg: CfTrainConfig) -> EmbeddingTable:
    """Refresh embeddings on an enlarged interaction set.

    Existing rows warm-start from ``old``'s layer-0 embeddings; new users and
    items get fresh rows.  Training runs for a fifth of ``cfg.epochs``.
    """
    if new_split.n_users < old.n_users or new_split.n_items < old.n_items:
        raise ValueError("the new universe must contain the old one")
    if cfg.dim != old.dim:
        raise ValueError("config dim differs from the existing table")
    rng = np.random.default_rng(cfg.seed + 1)
    bu = old.base_users if old.base_users is not None else old.user_vectors
    bi = old.base_items if old.base_items is not None else old.item_vectors
    users = rng.normal(0.0, cfg.init_std, size=(new_split.n_users, cfg.dim))
    items = rng.normal(0.0, cfg.init_std, size=(new_split.n_items, cfg.dim))
    users[:old.n_users] = bu
    items[:old.n_items] = bi
    epochs = max(1, int(round(0.2 * cfg.epochs)))
    warm = replace(cfg, eval_every=0)
    E = _train(new_split, warm, np.vstack([users, items]), epochs, rng)
    return _finish(new_split, cfg, E)
