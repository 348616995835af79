"""Evaluation protocols, recommendation pipelines and latency benchmarking.

A pipeline turns a batch of users into a score matrix over dense item
indices.  :class:`TokenPipeline` is the full system (tokens -> prompt ->
query vector -> cosine over the item pool); :class:`InnerProductPipeline`
scores by ``p_u . q_j`` straight from the CF table.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DatasetSplit
from .metrics import CUTOFFS, MetricReport
from .prompts import TEMPLATES, UNSEEN_TEMPLATE, USER_ONLY_TEMPLATE, build_vocabulary
from .ranker import PromptRenderer, QueryEncoderModel
from .retrieval import RetrievalIndex, build_index, topk_retrieve, update_item_pool

__all__ = [
    "PROTOCOLS",
    "TokenPipeline",
    "InnerProductPipeline",
    "BenchmarkReport",
    "evaluate",
    "evaluate_ranks",
    "recommend",
    "benchmark_inference",
    "user_context",
]

PROTOCOLS = ("standard", "unseen_prompt", "unseen_user", "user_id_only")


def user_context(split: DatasetSplit, u: int) -> list:
    """Items known about ``u`` at serving time (train, or held-out history for unseen users)."""
    if u in split.held_out:
        return list(split.held_out[u])
    return list(split.train[u])


def _protocol_users(split: DatasetSplit, protocol: str) -> list:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if protocol == "unseen_user":
        return sorted(u for u in split.unseen_users if split.test[u] is not None)
    return split.test_users()


class TokenPipeline:
    """Frozen tokenizers + query encoder + item pool."""

    def __init__(self, table, user_tokenizer, item_tokenizer, ranker: QueryEncoderModel,
                 templates=TEMPLATES, max_history: int = 100, seed: int = 0,
                 pool_items=None):
        self.user_tokenizer = user_tokenizer
        self.item_tokenizer = item_tokenizer
        self.ranker = ranker
        self.templates = templates
        self.seed = seed
        vocab = build_vocabulary(user_tokenizer.K, user_tokenizer.L)
        if vocab.size != ranker.vocab_size:
            raise ValueError("query encoder vocabulary does not match the tokenizers")
        self.renderer = PromptRenderer(vocab, np.zeros((1, vocab.K), int), np.zeros((1, vocab.K), int),
                                       templates, max_history)
        self.table = None
        self.index: RetrievalIndex | None = None
        self.refresh(table, pool_items)

    @property
    def n_items(self) -> int:
        return self.table.n_items

    def refresh(self, table, pool_items=None) -> None:
        """Swap in a new CF table: re-tokenize with the frozen tokenizers and rebuild the pool."""
        self.table = table
        self.user_codes = self.user_tokenizer.tokenize_batch(table.user_vectors)
        self.item_codes = self.item_tokenizer.tokenize_batch(table.item_vectors)
        self.renderer.set_codes(self.user_codes, self.item_codes)
        ids = np.arange(table.n_items) if pool_items is None else np.asarray(sorted(pool_items))
        self.index = build_index(table.item_vectors[ids], ids)

    def add_items(self, items) -> None:
        """Push refreshed vectors for ``items`` into the pool (no model parameters touched)."""
        self.index = update_item_pool(self.index, [(int(j), self.table.item_vectors[j]) for j in items])

    def _template_for(self, protocol: str, rng, history) -> int:
        if protocol == "unseen_prompt":
            return UNSEEN_TEMPLATE
        if protocol == "user_id_only":
            return USER_ONLY_TEMPLATE
        return self.renderer.pick_template(rng, bool(history))

    def prompt_ids(self, split: DatasetSplit, u: int, protocol: str = "standard") -> np.ndarray:
        rng = np.random.default_rng([self.seed, u])
        history = user_context(split, u)
        tid = self._template_for(protocol, rng, history)
        hist = None
        if self.renderer.templates[tid].requires_history:
            hist = self.renderer.history_for(history, int(rng.integers(1 << 31)))
        return self.renderer.render(tid, u, hist)

    def query_vectors(self, split: DatasetSplit, users, protocol: str = "standard") -> np.ndarray:
        return self.ranker.query_vectors([self.prompt_ids(split, u, protocol) for u in users])

    def score_users(self, split: DatasetSplit, users, protocol: str = "standard") -> np.ndarray:
        Z = self.query_vectors(split, users, protocol)
        Zn = (Z / np.linalg.norm(Z, axis=1, keepdims=True)).astype(np.float32)
        scores = np.full((len(users), self.n_items), -np.inf, dtype=np.float32)
        scores[:, self.index.ids] = Zn @ self.index.pool.T
        return scores


class InnerProductPipeline:
    """Scores ``p_u . q_j`` from the CF table (the LightGCN / MF baseline)."""

    def __init__(self, table):
        self.table = table

    @property
    def n_items(self) -> int:
        return self.table.n_items

    def score_users(self, split: DatasetSplit, users, protocol: str = "standard") -> np.ndarray:
        return self.table.user_vectors[list(users)] @ self.table.item_vectors.T


def evaluate_ranks(split: DatasetSplit, pipeline, protocol: str = "standard",
                   exclude_train: bool = True, chunk: int = 512) -> dict:
    """1-based rank of each protocol user's test item (``None`` if it cannot be retrieved)."""
    users = _protocol_users(split, protocol)
    ranks = {}
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = np.asarray(pipeline.score_users(split, batch, protocol))
        for row, u in enumerate(batch):
            s = scores[row]
            if exclude_train:
                ctx = user_context(split, u)
                if ctx:
                    s[ctx] = -np.inf
            t = split.test[u]
            ts = s[t]
            if ts == -np.inf:
                ranks[u] = None
                continue
            # ties resolve to the lower item index, matching topk_retrieve
            ranks[u] = 1 + int(np.sum(s > ts)) + int(np.sum(s[:t] == ts))
    return ranks


def evaluate(split: DatasetSplit, pipeline, protocol: str = "standard", cutoffs=CUTOFFS,
             exclude_train: bool = True) -> MetricReport:
    """Mean HR/NDCG over the protocol's test users."""
    ranks = evaluate_ranks(split, pipeline, protocol, exclude_train)
    if not ranks:
        raise ValueError(f"no test users for protocol {protocol!r}")
    return MetricReport.from_ranks([ranks[u] for u in sorted(ranks)], protocol, cutoffs)


def recommend(split: DatasetSplit, pipeline: TokenPipeline, users, k: int = 20,
              protocol: str = "standard", exclude_train: bool = True) -> dict:
    """``{user: (item ids, scores)}`` via exact top-K retrieval."""
    out = {}
    for u in users:
        z = pipeline.query_vectors(split, [u], protocol)[0]
        excl = set(user_context(split, u)) if exclude_train else None
        out[u] = topk_retrieve(pipeline.index, z, k, exclude=excl, with_scores=True)
    return out


def _summary(ms) -> dict:
    if not len(ms):
        return {"mean": 0.0, "median": 0.0, "p95": 0.0}
    a = np.asarray(ms)
    return {"mean": float(a.mean()), "median": float(np.median(a)), "p95": float(np.percentile(a, 95))}


@dataclass
class BenchmarkReport:
    n_users: int
    pool_size: int
    threads: int
    encode_ms: dict = field(default_factory=dict)
    retrieve_ms: dict = field(default_factory=dict)

    def to_kv(self) -> str:
        lines = [f"users = {self.n_users}", f"pool_size = {self.pool_size}", f"threads = {self.threads}"]
        for stage, d in (("encode", self.encode_ms), ("retrieve", self.retrieve_ms)):
            for key in ("mean", "median", "p95"):
                lines.append(f"{stage}_ms_{key} = {d[key]:.4f}")
        return "\n".join(lines) + "\n"


def benchmark_inference(pipeline: TokenPipeline, split: DatasetSplit, users, threads: int = 1,
                        k: int = 20) -> BenchmarkReport:
    """Per-user wall-clock time of query encoding and of retrieval, warm cache."""
    users = list(users)
    enc, ret = [], []
    with threadpool_limits(limits=threads):
        if users:
            u0 = users[0]
            topk_retrieve(pipeline.index, pipeline.query_vectors(split, [u0])[0], k)
        for u in users:
            t0 = time.perf_counter()
            z = pipeline.query_vectors(split, [u])[0]
            t1 = time.perf_counter()
            topk_retrieve(pipeline.index, z, k, exclude=set(user_context(split, u)))
            t2 = time.perf_counter()
            enc.append(1e3 * (t1 - t0))
            ret.append(1e3 * (t2 - t1))
    return BenchmarkReport(len(users), pipeline.index.size, threads, _summary(enc), _summary(ret))
