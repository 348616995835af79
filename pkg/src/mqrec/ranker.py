"""Compact query encoder trained with a pairwise cosine ranking loss.

The encoder stands in for a language-model backbone: token embeddings
(words and OOV ID tokens) are pooled into a hidden state ``h`` and an MLP
projects ``h`` into the collaborative item space, where items are ranked by
cosine similarity.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import DatasetSplit, truncate_and_shuffle_history
from .diffcore import AdamW, Mlp, NumericError, TrainingError, round_to_float32
from .prompts import (TEMPLATES, RenderedPrompt, Vocabulary, build_vocabulary, encode_text_tokens,
                      render_prompt)

__all__ = [
    "QueryEncoderModel",
    "RankerConfig",
    "PromptRenderer",
    "encode_query",
    "project_query",
    "ranking_loss",
    "sample_negative",
    "ranking_batch_loss",
    "train_ranker",
    "params_digest",
]

log = logging.getLogger(__name__)


class QueryEncoderModel:
    def __init__(self, token_embeddings: np.ndarray, projection: Mlp, mode: str = "mean_pool",
                 attention: dict | None = None):
        if mode not in ("mean_pool", "attention_pool"):
            raise ValueError(f"unknown encoder mode {mode!r}")
        if projection.in_dim != token_embeddings.shape[1]:
            raise ValueError("projection input dim must equal token embedding dim")
        if mode == "attention_pool" and attention is None:
            raise ValueError("attention_pool needs attention parameters")
        self.token_embeddings = token_embeddings
        self.projection = projection
        self.mode = mode
        self.attention = attention if mode == "attention_pool" else None

    @classmethod
    def init(cls, vocab_size: int, out_dim: int, embed_dim: int = 128, hidden: int = 256,
             mode: str = "mean_pool", seed: int = 0) -> "QueryEncoderModel":
        rng = np.random.default_rng(seed)
        emb = rng.normal(0.0, 0.1, size=(vocab_size, embed_dim))
        proj = Mlp.init([embed_dim, hidden, hidden, out_dim], rng)
        attn = None
        if mode == "attention_pool":
            attn = {n: rng.normal(0.0, 0.02, size=(embed_dim, embed_dim)) for n in ("Wq", "Wk", "Wv")}
        return cls(emb, proj, mode, attn)

    @property
    def vocab_size(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def out_dim(self) -> int:
        return self.projection.out_dim

    def params(self) -> dict:
        out = {"tokens": self.token_embeddings}
        out.update(self.projection.params("proj."))
        if self.attention is not None:
            out.update({f"attn.{k}": v for k, v in self.attention.items()})
        return out

    # -- batched forward/backward -------------------------------------------------

    def _check_ids(self, seqs):
        for s in seqs:
            s = np.asarray(s)
            if s.size == 0:
                raise ValueError("empty token sequence")
            if s.min() < 0 or s.max() >= self.vocab_size:
                raise ValueError("token id outside the vocabulary")

    def encode_batch(self, seqs):
        """Hidden states ``(B, d_e)`` for a list of token-id sequences, plus a cache."""
        self._check_ids(seqs)
        if self.mode == "mean_pool":
            lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
            indptr = np.concatenate([[0], np.cumsum(lengths)])
            indices = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs])
            data = np.repeat(1.0 / lengths, lengths)
            pool = sp.csr_matrix((data, indices, indptr), shape=(len(seqs), self.vocab_size))
            return pool @ self.token_embeddings, ("mean", pool)
        hs, caches = [], []
        for s in seqs:
            h, c = self._attend(np.asarray(s, dtype=np.int64))
            hs.append(h)
            caches.append(c)
        return np.vstack(hs), ("attn", caches)

    def _attend(self, ids):
        X = self.token_embeddings[ids]
        a = self.attention
        scale = 1.0 / np.sqrt(self.embed_dim)
        Q, Kx, V = X @ a["Wq"], X @ a["Wk"], X @ a["Wv"]
        S = (Q @ Kx.T) * scale
        S -= S.max(axis=1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=1, keepdims=True)
        Y = X + A @ V
        return Y.mean(axis=0, keepdims=True), (ids, X, Q, Kx, V, A, scale)

    def backward_batch(self, cache, g_h):
        """Parameter gradients given ``dLoss/dh`` for the batch."""
        kind, data = cache
        grads = {}
        if kind == "mean":
            grads["tokens"] = np.asarray(data.T @ g_h)
            return grads
        a = self.attention
        g_tok = np.zeros_like(self.token_embeddings)
        gq = np.zeros_like(a["Wq"])
        gk = np.zeros_like(a["Wk"])
        gv = np.zeros_like(a["Wv"])
        for row, (ids, X, Q, Kx, V, A, scale) in enumerate(data):
            T = X.shape[0]
            gY = np.broadcast_to(g_h[row] / T, X.shape)
            gA = gY @ V.T
            gV = A.T @ gY
            gS = A * (gA - np.sum(gA * A, axis=1, keepdims=True)) * scale
            gQ = gS @ Kx
            gK = gS.T @ Q
            gq += X.T @ gQ
            gk += X.T @ gK
            gv += X.T @ gV
            gX = gY + gQ @ a["Wq"].T + gK @ a["Wk"].T + gV @ a["Wv"].T
            np.add.at(g_tok, ids, gX)
        grads.update({"tokens": g_tok, "attn.Wq": gq, "attn.Wk": gk, "attn.Wv": gv})
        return grads

    def query_vectors(self, seqs) -> np.ndarray:
        h, _ = self.encode_batch(seqs)
        return self.projection(h)


def encode_query(model: QueryEncoderModel, p) -> np.ndarray:
    ids = p.token_ids if isinstance(p, RenderedPrompt) else p
    return model.encode_batch([ids])[0][0]


def project_query(model: QueryEncoderModel, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (model.embed_dim,):
        raise ValueError(f"hidden state must have dim {model.embed_dim}")
    return model.projection(h[None, :])[0]


def ranking_loss(score: float, label: int, margin: float) -> float:
    """``1 - s`` for positives, ``max(0, s - margin)`` for negatives."""
    if label == 1:
        return 1.0 - score
    if label == -1:
        return max(0.0, score - margin)
    raise ValueError("label must be +1 or -1")


def _cosine_rows(z, q):
    nz = np.linalg.norm(z, axis=1)
    nq = np.linalg.norm(q, axis=1)
    if np.any(nz == 0.0) or np.any(nq == 0.0):
        raise NumericError("cosine similarity of a zero vector")
    cos = np.einsum("ij,ij->i", z, q) / (nz * nq)
    # d cos / d z = q / (|z||q|) - cos * z / |z|^2
    dz = q / (nz * nq)[:, None] - cos[:, None] * z / (nz ** 2)[:, None]
    return cos, dz


def ranking_batch_loss(z, q_pos, q_neg, margin: float):
    """Mean over the batch of the positive plus negative ranking terms, and ``dL/dz``."""
    B = z.shape[0]
    cos_p, dzp = _cosine_rows(z, q_pos)
    cos_n, dzn = _cosine_rows(z, q_neg)
    active = cos_n > margin
    loss = float(np.sum(1.0 - cos_p) + np.sum(np.where(active, cos_n - margin, 0.0))) / B
    gz = (-dzp + active[:, None] * dzn) / B
    return loss, gz


def sample_negative(user: int, split: DatasetSplit, rng: np.random.Generator, history=None) -> int:
    """Uniform draw over items outside the user's full interaction history."""
    seen = set(history if history is not None else split.full_history(user))
    if len(seen) >= split.n_items:
        raise ValueError(f"user {user} has interacted with every item")
    while True:
        j = int(rng.integers(0, split.n_items))
        if j not in seen:
            return j


def params_digest(params: dict) -> str:
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class PromptRenderer:
    """Token-id sequences for users, with pre-tokenized template text.

    Produces the same ids as :func:`render_prompt` without re-tokenizing
    template words on every call.
    """

    def __init__(self, vocab: Vocabulary, user_codes, item_codes, templates=TEMPLATES,
                 max_history: int = 100, max_len: int = 512):
        self.vocab = vocab
        self.templates = {t.id: t for t in templates}
        self.max_history = max_history
        self.max_len = max_len
        K = vocab.K
        offs = np.arange(K) * vocab.L
        self.user_tokens = np.asarray(user_codes, dtype=np.int64) + offs + vocab.user_offset
        self.item_tokens = np.asarray(item_codes, dtype=np.int64) + offs + vocab.item_offset
        self.comma = vocab.words[","]
        self._parts = {}
        for t in templates:
            parts = []
            for part in re.split(r"(\{user\}|\{items\})", t.text):
                if part in ("{user}", "{items}"):
                    parts.append(part)
                elif part:
                    parts.append(np.asarray(encode_text_tokens(part, vocab), dtype=np.int64))
            fixed = sum(len(p) for p in parts if not isinstance(p, str)) + K
            self._parts[t.id] = (parts, (max_len - fixed + 1) // (K + 1))
        self.seen_ids = [t.id for t in templates if t.split == "seen"]
        self.seen_no_history = [t.id for t in templates if t.split == "seen" and not t.requires_history]

    def set_codes(self, user_codes=None, item_codes=None):
        offs = np.arange(self.vocab.K) * self.vocab.L
        if user_codes is not None:
            self.user_tokens = np.asarray(user_codes, dtype=np.int64) + offs + self.vocab.user_offset
        if item_codes is not None:
            self.item_tokens = np.asarray(item_codes, dtype=np.int64) + offs + self.vocab.item_offset

    def history_for(self, items, seed: int) -> list:
        return truncate_and_shuffle_history(items, self.max_history, seed)

    def render(self, template_id: int, user: int, history=None) -> np.ndarray:
        parts, fit = self._parts[template_id]
        t = self.templates[template_id]
        if t.requires_history and not len(history or []):
            raise ValueError(f"template {template_id} requires a non-empty interaction history")
        out = []
        for part in parts:
            if isinstance(part, str):
                if part == "{user}":
                    out.append(self.user_tokens[user])
                else:
                    hist = np.asarray(history[:fit], dtype=np.int64)
                    block = np.empty((hist.size, self.vocab.K + 1), dtype=np.int64)
                    block[:, :-1] = self.item_tokens[hist]
                    block[:, -1] = self.comma
                    out.append(block.reshape(-1)[:-1])
            else:
                out.append(part)
        return np.concatenate(out)

    def render_prompt(self, template_id: int, user: int, history=None) -> RenderedPrompt:
        """Reference path through :func:`render_prompt`, for checks."""
        t = self.templates[template_id]
        ucodes = self.user_tokens[user] - np.arange(self.vocab.K) * self.vocab.L - self.vocab.user_offset
        icodes = [tuple(self.item_tokens[j] - np.arange(self.vocab.K) * self.vocab.L - self.vocab.item_offset)
                  for j in (history or [])]
        return render_prompt(t, tuple(ucodes), icodes or None, self.vocab, self.max_len)

    def pick_template(self, rng: np.random.Generator, has_history: bool) -> int:
        pool = self.seen_ids if has_history else self.seen_no_history
        return int(pool[rng.integers(0, len(pool))])


@dataclass
class RankerConfig:
    margin: float = 0.1
    embed_dim: int = 128
    hidden: int = 256
    mode: str = "mean_pool"
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_history: int = 100
    seed: int = 0
    eval_every: int = 5
    patience: int = 3
    repeats: int = 1  # passes over the (user, item) pairs per epoch

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def _training_pairs(split: DatasetSplit):
    users, items = [], []
    for u, hist in enumerate(split.train):
        users.extend([u] * len(hist))
        items.extend(hist)
    return np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)


def train_ranker(model: QueryEncoderModel, split: DatasetSplit, user_tokenizer, item_tokenizer,
                 table, templates=TEMPLATES, cfg: RankerConfig | None = None,
                 validate=None) -> QueryEncoderModel:
    """Fit token embeddings, pooling and projection; tokenizers and ``table`` stay untouched.

    Each training pair ``(u, j)`` renders a randomly chosen seen template for
    ``u`` (history = ``u``'s other train items, truncated and shuffled),
    scores ``j`` and one uniformly drawn un-interacted item.  ``validate``
    is an optional callable ``model -> HR`` used for early stopping.
    """
    cfg = cfg or RankerConfig()
    if table.dim != model.out_dim:
        raise ValueError("projection output dim must equal the embedding table dim")
    frozen_before = (params_digest(user_tokenizer.params()), params_digest(item_tokenizer.params()),
                     params_digest({"u": table.user_vectors, "i": table.item_vectors}))
    user_codes = user_tokenizer.tokenize_batch(table.user_vectors)
    item_codes = item_tokenizer.tokenize_batch(table.item_vectors)
    vocab = build_vocabulary(user_tokenizer.K, max(user_tokenizer.L, item_tokenizer.L))
    if vocab.size != model.vocab_size:
        raise ValueError(f"model vocabulary ({model.vocab_size}) does not match tokenizers ({vocab.size})")
    renderer = PromptRenderer(vocab, user_codes, item_codes, templates, cfg.max_history)
    items = table.item_vectors
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    users, positives = _training_pairs(split)
    users, positives = np.tile(users, cfg.repeats), np.tile(positives, cfg.repeats)
    if users.size == 0:
        raise ValueError("no training interactions")
    full_hist = [set(split.full_history(u)) for u in range(split.n_users)]
    model.history = {"loss": [], "val": []}
    best, best_params, bad = -1.0, None, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(users.size)
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            seqs = []
            negs = np.empty(b.size, dtype=np.int64)
            for n, idx in enumerate(b):
                u, j = int(users[idx]), int(positives[idx])
                others = [i for i in split.train[u] if i != j]
                tid = renderer.pick_template(rng, bool(others))
                hist = renderer.history_for(others, int(rng.integers(1 << 31))) \
                    if renderer.templates[tid].requires_history else None
                seqs.append(renderer.render(tid, u, hist))
                negs[n] = sample_negative(u, split, rng, full_hist[u])
            h, cache = model.encode_batch(seqs)
            z, acts = model.projection.forward(h)
            loss, gz = ranking_batch_loss(z, items[positives[b]], items[negs], cfg.margin)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite ranking loss at epoch {epoch}")
            grads, gh = model.projection.backward(acts, gz, "proj.")
            grads.update(model.backward_batch(cache, gh))
            opt.step(grads)
            total += loss * b.size
        model.history["loss"].append(total / users.size)
        log.info("ranker epoch %d loss %.5f", epoch + 1, total / users.size)
        if validate is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            hr = validate(model)
            model.history["val"].append((epoch + 1, hr))
            log.info("ranker epoch %d validation HR@20 %.4f", epoch + 1, hr)
            if hr > best:
                best, bad = hr, 0
                best_params = {k: v.copy() for k, v in model.params().items()}
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    if best_params is not None:
        for k, v in model.params().items():
            v[...] = best_params[k]
    round_to_float32(model.params())
    frozen_after = (params_digest(user_tokenizer.params()), params_digest(item_tokenizer.params()),
                    params_digest({"u": table.user_vectors, "i": table.item_vectors}))
    if frozen_after != frozen_before:
        raise RuntimeError("frozen tokenizer or embedding parameters changed during ranker training")
    return model
