"""Alternative quantizers for the tokenizer ablations.

* ``vq_single``: the masked tokenizer collapsed to one codebook, no masking;
* ``rq_residual``: one encoder, K codebooks applied to successive residuals;
* ``kmeans``: Lloyd's algorithm run independently on K slices of the vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tokenizer import TokenizerTrainConfig, _recon_loss, default_codebook_size, nearest_codes, train_tokenizer

__all__ = [
    "AblationResult",
    "KMeansTokenizer",
    "ablation_quantize",
    "kmeans",
    "residual_quantize",
]

MODES = ("vq_single", "rq_residual", "kmeans")


def residual_quantize(codebooks, x):
    """Codes and per-level inputs of residual quantization.

    ``codebooks`` is a sequence of ``(L, d)`` arrays; level ``k`` quantizes
    whatever the previous levels left over.
    """
    residual = np.atleast_2d(np.asarray(x, dtype=np.float64))
    codes, inputs = [], []
    for C in codebooks:
        c = nearest_codes(np.asarray(C, dtype=np.float64), residual)
        codes.append(c)
        inputs.append(residual)
        residual = residual - C[c]
    return np.stack(codes, axis=1), inputs, residual


def kmeans(X, L: int, iters: int = 25, rng: np.random.Generator | None = None, init=None):
    """Lloyd's algorithm; returns ``(centroids, assignment)``.

    ``init`` optionally gives row indices of ``X`` to start from.  A centroid
    that loses all its points is moved to the point farthest from its
    current centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if L < 1:
        raise ValueError("L must be >= 1")
    if init is None:
        rng = rng or np.random.default_rng(0)
        init = rng.choice(N, size=L, replace=N < L)
    C = X[np.asarray(init)].copy()
    assign = nearest_codes(C, X)
    for _ in range(iters):
        for l in range(L):
            members = assign == l
            if members.any():
                C[l] = X[members].mean(axis=0)
            else:
                dist = np.sum((X - C[assign]) ** 2, axis=1)
                far = int(np.argmax(dist))
                C[l] = X[far]
                assign[far] = l
        new = nearest_codes(C, X)
        if np.array_equal(new, assign):
            break
        assign = new
    return C, assign


class KMeansTokenizer:
    """Per-slice k-means codes with the tokenizer's ``tokenize_batch`` interface."""

    def __init__(self, centroids: list, slices: list, side: str = "item"):
        self.centroids = centroids
        self.slices = slices
        self.side = side

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def L(self) -> int:
        return self.centroids[0].shape[0]

    def params(self) -> dict:
        return {f"centroids{k}": c for k, c in enumerate(self.centroids)}

    def tokenize_batch(self, vectors) -> np.ndarray:
        X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return np.stack([nearest_codes(C, X[:, s]) for C, s in zip(self.centroids, self.slices)], axis=1)

    def reconstruct(self, codes) -> np.ndarray:
        codes = np.atleast_2d(codes)
        return np.hstack([C[codes[:, k]] for k, C in enumerate(self.centroids)])

    @classmethod
    def fit(cls, X, K: int, L: int, iters: int = 25, seed: int = 0, side: str = "item"):
        X = np.asarray(X, dtype=np.float64)
        if K > X.shape[1]:
            raise ValueError("K cannot exceed the vector dimension")
        rng = np.random.default_rng(seed)
        bounds = np.linspace(0, X.shape[1], K + 1).round().astype(int)
        slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        cents = [kmeans(X[:, s], L, iters, rng)[0] for s in slices]
        return cls(cents, slices, side)


@dataclass
class AblationResult:
    mode: str
    codes: np.ndarray      # (N, K) code per entity and level
    recon_mse: float       # mean squared reconstruction error per entity
    model: object          # trained tokenizer or KMeansTokenizer

    def token_map(self) -> dict:
        return {i: tuple(int(c) for c in row) for i, row in enumerate(self.codes)}


def ablation_quantize(mode: str, vectors, side: str = "item",
                      cfg: TokenizerTrainConfig | None = None, kmeans_iters: int = 25) -> AblationResult:
    """Quantize one side's vectors with an ablation quantizer."""
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {MODES}")
    cfg = cfg or TokenizerTrainConfig()
    if hasattr(vectors, "user_vectors"):
        vectors = vectors.user_vectors if side == "user" else vectors.item_vectors
    X = np.asarray(vectors, dtype=np.float64)
    if mode == "vq_single":
        model = train_tokenizer(X, side, replace(cfg, K=1, rho=0.0, quantization="kway"))
        return AblationResult(mode, model.tokenize_batch(X), _recon_loss(model, X), model)
    if mode == "rq_residual":
        model = train_tokenizer(X, side, replace(cfg, rho=0.0, quantization="residual"))
        return AblationResult(mode, model.tokenize_batch(X), _recon_loss(model, X), model)
    L = cfg.L or default_codebook_size(X.shape[0])
    km = KMeansTokenizer.fit(X, cfg.K, L, kmeans_iters, cfg.seed, side)
    codes = km.tokenize_batch(X)
    mse = float(np.mean(np.sum((km.reconstruct(codes) - X) ** 2, axis=1)))
    return AblationResult(mode, codes, mse, km)
