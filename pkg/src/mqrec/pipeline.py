"""End-to-end training runs and model persistence.

Stages: CF table -> user/item tokenizers -> query encoder -> item pool.
Each stage can be saved to and restored from an artifact directory.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .artifacts import ArtifactBundle, FormatError, load_bundle, save_bundle
from .cf import EmbeddingTable, extend_for_new_entities, train_cf
from .config import Config
from .data import (DatasetSplit, InteractionDataset, hold_out_unseen_users, leave_one_out_split,
                   load_interactions, reveal_unseen)
from .diffcore import Mlp
from .evaluate import TokenPipeline, evaluate
from .prompts import TEMPLATES, build_vocabulary, load_templates
from .quantizers import KMeansTokenizer
from .ranker import QueryEncoderModel, train_ranker
from .tokenizer import Codebook, MaskConfig, MqTokenizerModel, train_tokenizer

__all__ = [
    "Trained",
    "VARIANTS",
    "load_split",
    "dataset_digest",
    "fit_tokenizers",
    "fit_ranker",
    "train_pipeline",
    "refresh_unseen",
    "run_variant",
    "save_table",
    "load_table",
    "save_tokenizers",
    "load_tokenizers",
    "save_ranker",
    "load_ranker",
]

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_mask", "no_kway", "vq_single", "rq_residual", "kmeans", "mf")


def dataset_digest(ds: InteractionDataset) -> str:
    h = hashlib.sha256()
    for u, hist in enumerate(ds.interactions):
        h.update(f"{ds.user_ids[u]}:{','.join(ds.item_ids[j] for j, _ in hist)};".encode())
    return h.hexdigest()[:16]


def load_split(cfg: Config) -> tuple:
    """``(dataset, split)`` as configured (leave-one-out, optional unseen hold-out)."""
    if not cfg.data:
        raise ValueError("config has no data path")
    ds = load_interactions(cfg.data, cfg.format)
    if cfg.unseen_fraction > 0:
        split = hold_out_unseen_users(ds, cfg.unseen_fraction, cfg.use_validation)
    else:
        split = leave_one_out_split(ds, cfg.use_validation)
    return ds, split


def _templates(cfg: Config):
    return load_templates(cfg.templates) if cfg.templates else TEMPLATES


def _seen_rows(split: DatasetSplit, side: str) -> np.ndarray:
    """Entities with CF signal; unseen ones are tokenized only after a refresh."""
    if side == "user":
        return np.asarray([u for u in range(split.n_users) if split.train[u]], dtype=np.int64)
    used = np.zeros(split.n_items, dtype=bool)
    for hist in split.train:
        used[hist] = True
    return np.flatnonzero(used)


def fit_tokenizers(table: EmbeddingTable, split: DatasetSplit, cfg: Config, variant: str = "full") -> tuple:
    """User and item tokenizers trained on the vectors of entities seen in training."""
    tcfg = cfg.tokenizer()
    if variant == "no_mask":
        tcfg = replace(tcfg, rho=0.0)
    elif variant == "no_kway":
        tcfg = replace(tcfg, K=1)
    elif variant == "vq_single":
        tcfg = replace(tcfg, K=1, rho=0.0)
    elif variant == "rq_residual":
        tcfg = replace(tcfg, rho=0.0, quantization="residual")
    out = []
    for side, vecs in (("user", table.user_vectors), ("item", table.item_vectors)):
        rows = _seen_rows(split, side)
        L = tcfg.L or (256 if max(split.n_users, split.n_items) < 10_000 else 512)
        if variant == "kmeans":
            out.append(KMeansTokenizer.fit(vecs[rows], tcfg.K, L, seed=tcfg.seed, side=side))
        else:
            out.append(train_tokenizer(vecs[rows], side, replace(tcfg, L=L)))
        log.info("%s tokenizer ready (K=%d, L=%d)", side, out[-1].K, out[-1].L)
    return tuple(out)


def _validation_view(split: DatasetSplit) -> DatasetSplit:
    return DatasetSplit(split.n_users, split.n_items, split.train, [None] * split.n_users,
                        list(split.validation), split.unseen_users, split.unseen_items, split.held_out)


def fit_ranker(table, split: DatasetSplit, user_tok, item_tok, cfg: Config,
               pool_items=None) -> QueryEncoderModel:
    rcfg = cfg.ranker()
    vocab = build_vocabulary(user_tok.K, user_tok.L)
    model = QueryEncoderModel.init(vocab.size, table.dim, rcfg.embed_dim, rcfg.hidden, rcfg.mode, rcfg.seed)
    templates = _templates(cfg)
    view = _validation_view(split) if any(v is not None for v in split.validation) else None

    def validate(m):
        pipe = TokenPipeline(table, user_tok, item_tok, m, templates, rcfg.max_history, cfg.seed, pool_items)
        return evaluate(view, pipe, "standard", (20,)).hr[20]

    return train_ranker(model, split, user_tok, item_tok, table, templates, rcfg,
                        validate if view is not None else None)


@dataclass
class Trained:
    split: DatasetSplit
    table: EmbeddingTable
    user_tokenizer: object
    item_tokenizer: object
    ranker: QueryEncoderModel
    pipeline: TokenPipeline


def _pool_items(split: DatasetSplit):
    return None if not split.unseen_items else sorted(set(range(split.n_items)) - split.unseen_items)


def train_pipeline(split: DatasetSplit, cfg: Config, variant: str = "full", table=None) -> Trained:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if table is None:
        ccfg = cfg.cf() if variant != "mf" else replace(cfg.cf(), method="mf_bpr")
        table = train_cf(split, ccfg)
    user_tok, item_tok = fit_tokenizers(table, split, cfg, "full" if variant == "mf" else variant)
    pool = _pool_items(split)
    ranker = fit_ranker(table, split, user_tok, item_tok, cfg, pool)
    pipe = TokenPipeline(table, user_tok, item_tok, ranker, _templates(cfg), cfg.rank_max_history,
                         cfg.seed, pool)
    return Trained(split, table, user_tok, item_tok, ranker, pipe)


def refresh_unseen(trained: Trained, cfg: Config) -> tuple:
    """Serve held-out users: retrain only the CF table, re-tokenize, refresh the pool.

    Returns ``(refreshed table, split with unseen histories visible)``.  The
    tokenizers and the query encoder are reused untouched.
    """
    split = trained.split
    view = reveal_unseen(split)
    table = extend_for_new_entities(trained.table, view, cfg.cf())
    trained.pipeline.refresh(table, None)
    return table, view


def run_variant(split: DatasetSplit, cfg: Config, variant: str = "full",
                protocols=("standard",), table=None) -> dict:
    """Train one ablation variant and evaluate it under the given protocols."""
    trained = train_pipeline(split, cfg, variant, table)
    out = {}
    for p in protocols:
        if p == "unseen_user":
            refresh_unseen(trained, cfg)
        out[p] = evaluate(split, trained.pipeline, p, cfg.cutoffs, cfg.eval_exclude_train)
    return out


# -- persistence ---------------------------------------------------------------

def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).copy()


def save_table(path, table: EmbeddingTable, manifest=None) -> Path:
    mats = {"user_vectors": table.user_vectors, "item_vectors": table.item_vectors}
    if table.base_users is not None:
        mats["base_users"] = table.base_users
        mats["base_items"] = table.base_items
    man = {"kind": "cf", "dim": table.dim, "n_users": table.n_users, "n_items": table.n_items}
    man.update(manifest or {})
    return save_bundle(path, ArtifactBundle(man, mats))


def load_table(path) -> tuple:
    b = load_bundle(path)
    if b.manifest.get("kind") != "cf":
        raise FormatError(f"{path}: not a CF table bundle")
    m = b.matrices
    base_u, base_i = (_f64(m["base_users"]), _f64(m["base_items"])) if "base_users" in m else (None, None)
    table = EmbeddingTable(_f64(m["user_vectors"]), _f64(m["item_vectors"]), base_u, base_i)
    if table.dim != int(b.manifest["dim"]):
        raise FormatError(f"{path}: manifest dim does not match the stored vectors")
    return table, b.manifest


def _mlp_from(mats: dict, prefix: str) -> Mlp:
    n = 0
    while f"{prefix}W{n}" in mats:
        n += 1
    if n == 0:
        raise FormatError(f"missing MLP parameters under {prefix!r}")
    return Mlp([_f64(mats[f"{prefix}W{i}"]) for i in range(n)], [_f64(mats[f"{prefix}b{i}"]) for i in range(n)])


def _tokenizer_matrices(tok, side: str) -> tuple:
    mats = {f"{side}.{k}": v for k, v in tok.params().items()}
    if isinstance(tok, KMeansTokenizer):
        man = {f"{side}.kind": "kmeans",
               f"{side}.slices": ";".join(f"{s.start}:{s.stop}" for s in tok.slices)}
    else:
        man = {f"{side}.kind": "mq", f"{side}.quantization": tok.quantization, f"{side}.beta": tok.beta,
               f"{side}.rho": tok.mask.rho, f"{side}.resample": tok.mask.resample, f"{side}.seed": tok.mask.seed}
    man.update({f"{side}.K": tok.K, f"{side}.L": tok.L})
    return mats, man


def _tokenizer_from(b: ArtifactBundle, side: str):
    man, mats = b.manifest, b.matrices
    K, L = int(man[f"{side}.K"]), int(man[f"{side}.L"])
    if man.get(f"{side}.kind") == "kmeans":
        slices = [slice(*(int(x) for x in s.split(":"))) for s in man[f"{side}.slices"].split(";")]
        return KMeansTokenizer([_f64(mats[f"{side}.centroids{k}"]) for k in range(K)], slices, side)
    quant = man[f"{side}.quantization"]
    n_enc = K if quant == "kway" else 1
    encoders = [_mlp_from(mats, f"{side}.enc{k}.") for k in range(n_enc)]
    decoder = _mlp_from(mats, f"{side}.dec.")
    codebook = Codebook(_f64(mats[f"{side}.codebook"]), side)
    if codebook.K != K or codebook.L != L:
        raise FormatError(f"{side} codebook shape disagrees with the manifest")
    mask = MaskConfig(float(man[f"{side}.rho"]), man[f"{side}.resample"], int(man[f"{side}.seed"]))
    return MqTokenizerModel(encoders, decoder, codebook, mask, float(man[f"{side}.beta"]), quant)


def save_tokenizers(path, user_tok, item_tok, table: EmbeddingTable, ds: InteractionDataset | None = None,
                    manifest=None) -> Path:
    mats, man = {}, {"kind": "tokenizers"}
    token_maps = {}
    for side, tok, vecs in (("user", user_tok, table.user_vectors), ("item", item_tok, table.item_vectors)):
        m, mm = _tokenizer_matrices(tok, side)
        mats.update(m)
        man.update(mm)
        if ds is not None:
            ids = ds.user_ids if side == "user" else ds.item_ids
            token_maps[side] = (ids, tok.tokenize_batch(vecs))
    man.update(manifest or {})
    return save_bundle(path, ArtifactBundle(man, mats, token_maps))


def load_tokenizers(path) -> tuple:
    b = load_bundle(path)
    if b.manifest.get("kind") != "tokenizers":
        raise FormatError(f"{path}: not a tokenizer bundle")
    return _tokenizer_from(b, "user"), _tokenizer_from(b, "item"), b


def save_ranker(path, model: QueryEncoderModel, manifest=None) -> Path:
    man = {"kind": "ranker", "mode": model.mode, "vocab_size": model.vocab_size,
           "embed_dim": model.embed_dim, "out_dim": model.out_dim}
    man.update(manifest or {})
    return save_bundle(path, ArtifactBundle(man, dict(model.params())))


def load_ranker(path) -> QueryEncoderModel:
    b = load_bundle(path)
    if b.manifest.get("kind") != "ranker":
        raise FormatError(f"{path}: not a ranker bundle")
    m = b.matrices
    attn = None
    if b.manifest["mode"] == "attention_pool":
        attn = {n: _f64(m[f"attn.{n}"]) for n in ("Wq", "Wk", "Wv")}
    model = QueryEncoderModel(_f64(m["tokens"]), _mlp_from(m, "proj."), b.manifest["mode"], attn)
    if model.vocab_size != int(b.manifest["vocab_size"]) or model.out_dim != int(b.manifest["out_dim"]):
        raise FormatError(f"{path}: manifest dims do not match stored matrices")
    return model
