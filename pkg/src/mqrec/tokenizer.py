"""Masked vector-quantized ID tokenizer.

An entity vector is randomly masked, passed through K independent encoder
MLPs, and each encoder output is snapped to its nearest codeword in a
per-encoder sub-codebook.  The K codeword indices are the entity's tokens.
A decoder MLP reconstructs the vector from the mean of the selected
codewords.

Training minimizes ``recon + cb + beta * cm``:

* ``recon = ||v - r||^2`` reaches the encoders through a straight-through
  edge (the decoder-input gradient is copied onto every encoder output) and
  never reaches the codebook;
* ``cb = sum_k ||sg[a_k] - c_k||^2`` moves only codewords;
* ``cm = sum_k ||a_k - sg[c_k]||^2`` moves only encoders.

``quantization="residual"`` swaps the K-way layout for a single encoder
whose output is quantized by K codebooks in sequence, each on the residual
left by the previous level (the RQ-VAE ablation).  With ``K == 1`` the two
layouts coincide.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamW, GradRoute, Mlp, NumericError, TrainingError, round_to_float32, route_gradient

__all__ = [
    "MaskConfig",
    "Codebook",
    "TokenTuple",
    "MqLossReport",
    "MqTokenizerModel",
    "TokenizerTrainConfig",
    "apply_mask",
    "encode_kway",
    "nearest_codes",
    "quantize_nearest",
    "tokenize_entity",
    "tokenize_batch",
    "decode_from_tokens",
    "compute_mq_losses",
    "train_tokenizer",
    "default_codebook_size",
]

log = logging.getLogger(__name__)


@dataclass
class MaskConfig:
    rho: float = 0.2
    resample: str = "per_epoch"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"masking ratio must lie in [0, 1], got {self.rho}")
        if self.resample not in ("per_epoch", "per_step"):
            raise ValueError(f"unknown resample mode {self.resample!r}")


@dataclass
class Codebook:
    embeddings: np.ndarray  # (K, L, d_c)
    side: str = "item"

    def __post_init__(self):
        if self.embeddings.ndim != 3:
            raise ValueError("codebook embeddings must have shape (K, L, d_c)")
        if self.K < 1 or self.L < 2:
            raise ValueError("codebook needs K >= 1 and L >= 2")
        if not np.all(np.isfinite(self.embeddings)):
            raise NumericError("non-finite codebook entries")

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def L(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class TokenTuple:
    side: str
    codes: tuple

    def __len__(self):
        return len(self.codes)


@dataclass
class MqLossReport:
    recon: float
    cb: float
    cm: float
    total: float
    beta: float


class MqTokenizerModel:
    def __init__(self, encoders: list, decoder: Mlp, codebook: Codebook,
                 mask: MaskConfig | None = None, beta: float = 0.25,
                 quantization: str = "kway"):
        if quantization not in ("kway", "residual"):
            raise ValueError(f"unknown quantization {quantization!r}")
        n_enc = codebook.K if quantization == "kway" else 1
        if len(encoders) != n_enc:
            raise ValueError(f"expected {n_enc} encoders, got {len(encoders)}")
        for enc in encoders:
            if enc.out_dim != codebook.dim:
                raise ValueError("encoder output dim must equal codebook dim")
        if decoder.in_dim != codebook.dim:
            raise ValueError("decoder input dim must equal codebook dim")
        self.encoders = encoders
        self.decoder = decoder
        self.codebook = codebook
        self.mask = mask or MaskConfig()
        self.beta = beta
        self.quantization = quantization
        self.history: dict = {}

    @classmethod
    def init(cls, dim: int, K: int, L: int, code_dim: int = 32, hidden: int = 256,
             side: str = "item", mask: MaskConfig | None = None, beta: float = 0.25,
             seed: int = 0, quantization: str = "kway") -> "MqTokenizerModel":
        rng = np.random.default_rng(seed)
        n_enc = K if quantization == "kway" else 1
        encoders = [Mlp.init([dim, hidden, hidden, code_dim], rng) for _ in range(n_enc)]
        decoder = Mlp.init([code_dim, hidden, hidden, dim], rng)
        codebook = Codebook(rng.normal(0.0, 1.0 / np.sqrt(code_dim), size=(K, L, code_dim)), side)
        return cls(encoders, decoder, codebook, mask, beta, quantization)

    @property
    def K(self) -> int:
        return self.codebook.K

    @property
    def L(self) -> int:
        return self.codebook.L

    @property
    def side(self) -> str:
        return self.codebook.side

    @property
    def input_dim(self) -> int:
        return self.encoders[0].in_dim

    def params(self) -> dict:
        out = {}
        for k, enc in enumerate(self.encoders):
            out.update(enc.params(f"enc{k}."))
        out.update(self.decoder.params("dec."))
        out["codebook"] = self.codebook.embeddings
        return out

    def tokenize_batch(self, vectors) -> np.ndarray:
        return tokenize_batch(self, vectors)


def default_codebook_size(n_entities: int) -> int:
    return 256 if n_entities < 10_000 else 512


def apply_mask(v, cfg: MaskConfig, rng: np.random.Generator):
    """Zero each element independently with probability ``cfg.rho`` (no rescaling)."""
    v = np.asarray(v, dtype=np.float64)
    keep = rng.random(v.shape) >= cfg.rho
    return v * keep


def encode_kway(model: MqTokenizerModel, v_masked):
    """Encoder outputs ``a^k`` for every encoder, shaped like the input batch."""
    x = np.asarray(v_masked, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != model.input_dim:
        raise ValueError(f"expected vectors of dim {model.input_dim}, got {xb.shape[1]}")
    outs = [enc(xb) for enc in model.encoders]
    return [o[0] for o in outs] if single else outs


def nearest_codes(codewords: np.ndarray, a: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the nearest row of ``codewords`` for each row of ``a``.

    Distances are formed as explicit squared differences, not the expanded
    ``|a|^2 - 2 a.c + |c|^2`` form, so exact ties stay exact and resolve to
    the lowest index.
    """
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite vector passed to quantization")
    out = np.empty(a.shape[0], dtype=np.int64)
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        diff = block[:, None, :] - codewords[None, :, :]
        dist = np.einsum("bld,bld->bl", diff, diff)
        out[start:start + chunk] = np.argmin(dist, axis=1)
    return out


def quantize_nearest(cb: Codebook, k: int, a):
    if not 0 <= k < cb.K:
        raise ValueError(f"sub-codebook index {k} out of range [0, {cb.K})")
    a = np.asarray(a, dtype=np.float64)
    code = int(nearest_codes(cb.embeddings[k], a[None, :])[0])
    return code, cb.embeddings[k, code].copy()


def _quantize(model: MqTokenizerModel, enc_out: list):
    """Codes, selected codewords and quantizer inputs for a batch of encoder outputs."""
    C = model.codebook.embeddings
    codes, chosen, inputs = [], [], []
    if model.quantization == "kway":
        for k, a in enumerate(enc_out):
            c = nearest_codes(C[k], a)
            codes.append(c)
            chosen.append(C[k, c])
            inputs.append(a)
    else:
        residual = enc_out[0]
        for k in range(model.K):
            c = nearest_codes(C[k], residual)
            codes.append(c)
            chosen.append(C[k, c])
            inputs.append(residual)
            residual = residual - C[k, c]
    return np.stack(codes, axis=1), chosen, inputs


def _pool(model: MqTokenizerModel, chosen: list):
    total = chosen[0].copy()
    for q in chosen[1:]:
        total = total + q
    return total / model.K if model.quantization == "kway" else total


def tokenize_batch(model: MqTokenizerModel, vectors) -> np.ndarray:
    """``(N, K)`` integer codes for unmasked input vectors."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    codes = np.empty((x.shape[0], model.K), dtype=np.int64)
    step = 2048
    for start in range(0, x.shape[0], step):
        enc_out = [enc(x[start:start + step]) for enc in model.encoders]
        codes[start:start + step] = _quantize(model, enc_out)[0]
    return codes


def tokenize_entity(model: MqTokenizerModel, v) -> TokenTuple:
    codes = tokenize_batch(model, np.asarray(v)[None, :])[0]
    return TokenTuple(model.side, tuple(int(c) for c in codes))


def decode_from_tokens(model: MqTokenizerModel, t: TokenTuple):
    codes = tuple(t.codes if isinstance(t, TokenTuple) else t)
    if len(codes) != model.K:
        raise ValueError(f"expected {model.K} codes, got {len(codes)}")
    for c in codes:
        if not 0 <= c < model.L:
            raise ValueError(f"code {c} out of range [0, {model.L})")
    C = model.codebook.embeddings
    chosen = [C[k, c][None, :] for k, c in enumerate(codes)]
    return model.decoder(_pool(model, chosen))[0]


@dataclass
class MqForward:
    """Everything :func:`compute_mq_losses` computed, for inspection in tests."""

    codes: np.ndarray
    reconstruction: np.ndarray
    grads_by_term: dict = field(default_factory=dict)
    recon_grad_codeword: list = field(default_factory=list)
    recon_grad_encoder_out: list = field(default_factory=list)


def compute_mq_losses(model: MqTokenizerModel, v, v_masked, per_term: bool = False):
    """Batch-mean losses and their gradients.

    Returns ``(report, grads, fwd)``.  ``grads`` covers every parameter in
    ``model.params()``.  With ``per_term=True`` the gradient set of each loss
    term is also back-propagated separately into ``fwd.grads_by_term``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    vm = np.atleast_2d(np.asarray(v_masked, dtype=np.float64))
    if v.shape != vm.shape:
        raise ValueError("original and masked batches differ in shape")
    B = v.shape[0]
    K = model.K
    enc_fwd = [enc.forward(vm) for enc in model.encoders]
    enc_out = [o for o, _ in enc_fwd]
    codes, chosen, q_inputs = _quantize(model, enc_out)
    pooled = _pool(model, chosen)
    recon_out, dec_acts = model.decoder.forward(pooled)

    err = recon_out - v
    recon = float(np.sum(err * err) / B)
    gaps = [a - c for a, c in zip(q_inputs, chosen)]
    vq = float(sum(np.sum(g * g) for g in gaps) / B)
    cb, cm = vq, vq
    total = recon + cb + model.beta * cm
    if not np.isfinite(total):
        raise NumericError("non-finite tokenizer loss")
    report = MqLossReport(recon, cb, cm, total, model.beta)

    # reconstruction: decoder, then straight-through onto the encoder side
    dec_grads, g_pooled = model.decoder.backward(dec_acts, 2.0 * err / B, "dec.")
    g_codeword = [g_pooled / K if model.quantization == "kway" else g_pooled for _ in range(K)]
    if model.quantization == "kway":
        recon_enc = [route_gradient(GradRoute.STRAIGHT_THROUGH, chosen[k], g_codeword[k]) for k in range(K)]
    else:
        recon_enc = [route_gradient(GradRoute.STRAIGHT_THROUGH, chosen[0], g_pooled)]
    # codebook loss: encoder side is behind a stop-gradient
    cb_codeword = [-2.0 * g / B for g in gaps]
    cb_enc = [route_gradient(GradRoute.STOP_GRADIENT, q, g) for q, g in zip(q_inputs, gaps)]
    # commitment loss: codeword side is behind a stop-gradient
    cm_enc_levels = [2.0 * g / B for g in gaps]
    cm_codeword = [route_gradient(GradRoute.STOP_GRADIENT, c, g) for c, g in zip(chosen, cm_enc_levels)]
    if model.quantization == "kway":
        cm_enc = cm_enc_levels
        cb_enc_sum = cb_enc
    else:
        # every residual level is the encoder output minus stop-gradient codewords
        cm_enc = [sum(cm_enc_levels[1:], cm_enc_levels[0])]
        cb_enc_sum = [sum(cb_enc[1:], cb_enc[0])]

    def codebook_grad(per_level):
        g = np.zeros_like(model.codebook.embeddings)
        for k in range(K):
            np.add.at(g[k], codes[:, k], per_level[k])
        return g

    def encoder_grads(per_enc):
        out = {}
        for k, (enc, (_, acts)) in enumerate(zip(model.encoders, enc_fwd)):
            out.update(enc.backward(acts, per_enc[k], f"enc{k}.")[0])
        return out

    combined_enc = [r + cbe + model.beta * c for r, cbe, c in zip(recon_enc, cb_enc_sum, cm_enc)]
    grads = encoder_grads(combined_enc)
    grads.update(dec_grads)
    grads["codebook"] = codebook_grad([a + b for a, b in zip(cb_codeword, cm_codeword)])

    fwd = MqForward(codes, recon_out, recon_grad_codeword=g_codeword,
                    recon_grad_encoder_out=recon_enc)
    if per_term:
        zero_dec = {k: np.zeros_like(g) for k, g in dec_grads.items()}
        t_recon = encoder_grads(recon_enc)
        t_recon.update(dec_grads)
        t_recon["codebook"] = np.zeros_like(model.codebook.embeddings)
        t_cb = encoder_grads(cb_enc_sum)
        t_cb.update(zero_dec)
        t_cb["codebook"] = codebook_grad(cb_codeword)
        t_cm = encoder_grads(cm_enc)
        t_cm.update(zero_dec)
        t_cm["codebook"] = codebook_grad(cm_codeword)
        fwd.grads_by_term = {"recon": t_recon, "cb": t_cb, "cm": t_cm}
    return report, grads, fwd


@dataclass
class TokenizerTrainConfig:
    K: int = 3
    L: int | None = None  # None: 256 below 10k entities, else 512
    code_dim: int = 32
    hidden: int = 256
    rho: float = 0.2
    resample: str = "per_epoch"
    beta: float = 0.25
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    dead_code_every: int = 10
    quantization: str = "kway"


def _recon_loss(model: MqTokenizerModel, vectors) -> float:
    x = np.asarray(vectors, dtype=np.float64)
    total = 0.0
    for start in range(0, x.shape[0], 2048):
        xb = x[start:start + 2048]
        enc_out = [enc(xb) for enc in model.encoders]
        _, chosen, _ = _quantize(model, enc_out)
        r = model.decoder(_pool(model, chosen))
        total += float(np.sum((r - xb) ** 2))
    return total / x.shape[0]


def _init_codebook(model: MqTokenizerModel, masked, rng: np.random.Generator) -> None:
    """Seed codewords with sampled encoder outputs (residuals, for RQ)."""
    C = model.codebook.embeddings
    N, L = masked.shape[0], model.L
    enc_out = [enc(masked) for enc in model.encoders]
    residual = enc_out[0]
    for k in range(model.K):
        src = enc_out[k] if model.quantization == "kway" else residual
        idx = rng.choice(N, size=L, replace=N < L)
        C[k] = src[idx]
        if N < L:
            C[k] += rng.normal(0.0, 1e-3, size=C[k].shape)
        if model.quantization == "residual":
            residual = residual - C[k, nearest_codes(C[k], residual)]


def train_tokenizer(vectors, side: str, cfg: TokenizerTrainConfig | None = None) -> MqTokenizerModel:
    """Mini-batch AdamW training on all vectors of one side (user or item).

    ``vectors`` is an ``(N, d)`` array (or an EmbeddingTable, in which case
    ``side`` selects the rows).  The returned model carries
    ``history["recon"]``: reconstruction loss on unmasked inputs before
    training and after each epoch.
    """
    cfg = cfg or TokenizerTrainConfig()
    if hasattr(vectors, "user_vectors"):
        vectors = vectors.user_vectors if side == "user" else vectors.item_vectors
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty (N, d) matrix of vectors")
    N, d = X.shape
    L = cfg.L or default_codebook_size(N)
    mask = MaskConfig(cfg.rho, cfg.resample, cfg.seed)
    model = MqTokenizerModel.init(d, cfg.K, L, cfg.code_dim, cfg.hidden, side, mask,
                                  cfg.beta, cfg.seed, cfg.quantization)
    rng = np.random.default_rng(cfg.seed + 7919)

    masked = apply_mask(X, mask, rng)
    _init_codebook(model, masked, rng)

    params = model.params()
    nets = {k: v for k, v in params.items() if k != "codebook"}
    opt_nets = AdamW(nets, lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_cb = AdamW({"codebook": params["codebook"]}, lr=cfg.lr, weight_decay=0.0)

    history = {"recon": [_recon_loss(model, X)], "total": []}
    usage = np.zeros((model.K, L), dtype=np.int64)
    for epoch in range(cfg.epochs):
        if cfg.resample == "per_epoch" and epoch > 0:
            masked = apply_mask(X, mask, rng)
        order = rng.permutation(N)
        usage[:] = 0
        epoch_total = 0.0
        for start in range(0, N, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            xb = X[b]
            xm = apply_mask(xb, mask, rng) if cfg.resample == "per_step" else masked[b]
            try:
                report, grads, fwd = compute_mq_losses(model, xb, xm)
            except NumericError:
                raise TrainingError(f"non-finite tokenizer loss at epoch {epoch}") from None
            epoch_total += report.total * b.size
            for k in range(model.K):
                usage[k] += np.bincount(fwd.codes[:, k], minlength=L)
            cb_grad = grads.pop("codebook")
            opt_nets.step(grads)
            opt_cb.step({"codebook": cb_grad})
        history["total"].append(epoch_total / N)
        history["recon"].append(_recon_loss(model, X))
        if cfg.dead_code_every and (epoch + 1) % cfg.dead_code_every == 0 and epoch + 1 < cfg.epochs:
            _reset_dead_codes(model, masked, usage, rng)
        log.debug("%s tokenizer epoch %d total %.5f recon %.5f", side, epoch, history["total"][-1], history["recon"][-1])

    round_to_float32(model.params())
    history["recon"][-1] = _recon_loss(model, X)
    model.history = history
    return model


def _reset_dead_codes(model: MqTokenizerModel, masked, usage, rng) -> None:
    C = model.codebook.embeddings
    enc_out = [enc(masked) for enc in model.encoders]
    residual = enc_out[0]
    for k in range(model.K):
        src = enc_out[k] if model.quantization == "kway" else residual
        dead = np.flatnonzero(usage[k] == 0)
        if dead.size:
            C[k, dead] = src[rng.choice(src.shape[0], size=dead.size, replace=True)]
        if model.quantization == "residual":
            residual = residual - C[k, nearest_codes(C[k], residual)]
