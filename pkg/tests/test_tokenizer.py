import numpy as np
import pytest

from mqrec.diffcore import Mlp, NumericError
from mqrec.tokenizer import (Codebook, MaskConfig, MqTokenizerModel, TokenizerTrainConfig, TokenTuple,
                             apply_mask, compute_mq_losses, decode_from_tokens, default_codebook_size,
                             encode_kway, quantize_nearest, tokenize_batch, tokenize_entity, train_tokenizer)

from _support import cluster_fixture, code_sharing_rates, surrogate_fd_errors


def _model(rng, dim=6, K=3, L=5, code_dim=4, hidden=8, quantization="kway", beta=0.25):
    m = MqTokenizerModel.init(dim, K, L, code_dim, hidden, "item", MaskConfig(0.2), beta,
                              int(rng.integers(1 << 30)), quantization)
    m.codebook.embeddings[...] = rng.normal(size=m.codebook.embeddings.shape)
    return m


def _identity_mlp(d):
    eye = np.eye(d)
    return Mlp([eye.copy(), eye.copy(), eye.copy()], [np.zeros(d), np.zeros(d), np.zeros(d)])


def _const_mlp(d_in, d_out, value):
    m = Mlp.zeros([d_in, 3, 3, d_out])
    m.biases[-1][...] = value
    return m


class TestMask:
    def test_rho_zero_identity(self, rng):
        v = rng.normal(size=50)
        assert np.array_equal(apply_mask(v, MaskConfig(0.0), rng), v)

    def test_rho_one_zero(self, rng):
        assert not np.any(apply_mask(rng.normal(size=50), MaskConfig(1.0), rng))

    def test_rate_concentrates(self, rng):
        v = rng.normal(size=10_000) + 5.0  # no exact zeros before masking
        out = apply_mask(v, MaskConfig(0.2), rng)
        frac = np.mean(out == 0)
        # 0.2 +- 0.02 is more than 4 standard deviations of Binomial(10000, 0.2)/10000
        assert 0.18 <= frac <= 0.22
        kept = out != 0
        assert np.array_equal(out[kept], v[kept])  # no rescaling

    def test_deterministic_given_state(self):
        v = np.arange(1.0, 101.0)
        a = apply_mask(v, MaskConfig(0.5), np.random.default_rng(4))
        b = apply_mask(v, MaskConfig(0.5), np.random.default_rng(4))
        assert np.array_equal(a, b)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            MaskConfig(1.5)
        with pytest.raises(ValueError):
            MaskConfig(0.2, resample="sometimes")


class TestEncodeQuantize:
    def test_k_outputs(self, rng):
        m = _model(rng)
        outs = encode_kway(m, rng.normal(size=6))
        assert len(outs) == 3 and all(o.shape == (4,) for o in outs)

    def test_zero_encoders(self, rng):
        m = _model(rng)
        m.encoders = [Mlp.zeros([6, 8, 8, 4]) for _ in range(3)]
        assert all(not np.any(o) for o in encode_kway(m, rng.normal(size=6)))

    def test_encoders_independent(self, rng):
        m = _model(rng)
        a = encode_kway(m, rng.normal(size=6))
        assert not np.allclose(a[0], a[1])

    def test_obvious_nearest(self):
        cb = Codebook(np.array([[[1.0, 0.0], [0.0, 1.0]]]), "item")
        code, emb = quantize_nearest(cb, 0, np.array([0.9, 0.1]))
        assert code == 0 and emb.tolist() == [1.0, 0.0]

    def test_tie_goes_to_lowest(self):
        cb = Codebook(np.array([[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]]), "item")
        assert quantize_nearest(cb, 0, np.array([0.5, 0.5]))[0] == 0
        assert quantize_nearest(cb, 0, np.array([2.0, 0.0]))[0] == 0

    def test_exhaustive_oracle(self, rng):
        cb = Codebook(rng.normal(size=(2, 64, 8)), "user")
        for _ in range(200):
            a = rng.normal(size=8)
            k = int(rng.integers(2))
            d = [float(np.sum((a - c) ** 2)) for c in cb.embeddings[k]]
            assert quantize_nearest(cb, k, a)[0] == d.index(min(d))

    def test_non_finite(self):
        cb = Codebook(np.zeros((1, 2, 2)) + np.array([[[0.0, 0.0], [1.0, 1.0]]]), "item")
        with pytest.raises(NumericError):
            quantize_nearest(cb, 0, np.array([np.inf, 0.0]))

    def test_bad_subcodebook(self):
        cb = Codebook(np.zeros((1, 2, 2)), "item")
        with pytest.raises(ValueError):
            quantize_nearest(cb, 1, np.zeros(2))


class TestTokenizeDecode:
    def test_identical_inputs_identical_tokens(self, rng):
        m = _model(rng)
        v = rng.normal(size=6)
        t = tokenize_entity(m, v)
        assert t == tokenize_entity(m, v.copy())
        assert isinstance(t, TokenTuple) and len(t) == 3

    def test_batch_matches_single(self, rng):
        m = _model(rng)
        X = rng.normal(size=(20, 6))
        codes = tokenize_batch(m, X)
        assert [tuple(r) for r in codes] == [tokenize_entity(m, x).codes for x in X]

    def test_inference_is_unmasked(self, rng):
        m = _model(rng)
        m.mask = MaskConfig(0.99)
        X = rng.normal(size=(10, 6))
        assert np.array_equal(tokenize_batch(m, X), tokenize_batch(m, X))

    def test_k1_pooled_is_codeword(self, rng):
        m = MqTokenizerModel([_identity_mlp(2)], _identity_mlp(2),
                             Codebook(np.array([[[3.0, 1.0], [0.5, 2.0]]]), "item"))
        np.testing.assert_array_equal(decode_from_tokens(m, TokenTuple("item", (1,))), [0.5, 2.0])

    def test_k2_pooled_is_mean(self):
        C = np.array([[[1.0, 0.0], [9.0, 9.0]], [[0.0, 1.0], [9.0, 9.0]]])
        m = MqTokenizerModel([_identity_mlp(2), _identity_mlp(2)], _identity_mlp(2), Codebook(C, "item"))
        np.testing.assert_allclose(decode_from_tokens(m, (0, 0)), [0.5, 0.5])

    def test_zero_decoder(self, rng):
        m = _model(rng)
        m.decoder = Mlp.zeros([4, 8, 8, 6])
        assert not np.any(decode_from_tokens(m, (0, 1, 2)))

    def test_out_of_range(self, rng):
        m = _model(rng)
        with pytest.raises(ValueError):
            decode_from_tokens(m, (0, 1, 5))
        with pytest.raises(ValueError):
            decode_from_tokens(m, (0, 1))

    def test_symbol_budget_at_scale(self):
        # K=3, L=512 over 39,387 items can only ever use 3 * 512 = 1,536 symbols
        rng = np.random.default_rng(0)
        m = MqTokenizerModel.init(64, 3, 512, seed=1)
        codes = tokenize_batch(m, rng.normal(size=(39_387, 64)))
        used = sum(len(np.unique(codes[:, k])) for k in range(3))
        assert used <= 1536
        assert codes.min() >= 0 and codes.max() < 512


class TestLosses:
    def test_perfect_fit_zero(self):
        v = np.array([0.3, -1.2, 2.0])
        c = np.array([0.5, -0.5])
        C = np.stack([np.stack([c, c + 3.0]), np.stack([c, c - 3.0])])
        m = MqTokenizerModel([_const_mlp(3, 2, c), _const_mlp(3, 2, c)], _const_mlp(2, 3, v), Codebook(C, "item"))
        rep, _, _ = compute_mq_losses(m, v, v)
        assert (rep.recon, rep.cb, rep.cm, rep.total) == (0.0, 0.0, 0.0, 0.0)

    def test_recon_is_squared_norm(self, rng):
        m = _model(rng, dim=2)
        m.decoder = Mlp.zeros([4, 8, 8, 2])
        rep, _, _ = compute_mq_losses(m, np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert rep.recon == 1.0

    def test_terms_match_direct_computation(self, rng):
        m = _model(rng)
        v = rng.normal(size=(5, 6))
        vm = apply_mask(v, MaskConfig(0.3), rng)
        rep, _, fwd = compute_mq_losses(m, v, vm)
        a = [enc(vm) for enc in m.encoders]
        C = m.codebook.embeddings
        chosen = [C[k, fwd.codes[:, k]] for k in range(3)]
        r = m.decoder(sum(chosen) / 3)
        assert rep.recon == pytest.approx(np.sum((v - r) ** 2) / 5, rel=1e-12)
        vq = sum(np.sum((a[k] - chosen[k]) ** 2) for k in range(3)) / 5
        assert rep.cb == pytest.approx(vq, rel=1e-12) and rep.cm == pytest.approx(vq, rel=1e-12)
        assert rep.total == rep.recon + rep.cb + rep.beta * rep.cm

    def test_routing_zero_gradients(self, rng):
        m = _model(rng)
        v = rng.normal(size=(7, 6))
        _, _, fwd = compute_mq_losses(m, v, v, per_term=True)
        t = fwd.grads_by_term
        assert all(not np.any(g) for k, g in t["cb"].items() if k.startswith("enc"))
        assert not np.any(t["cm"]["codebook"])
        assert not np.any(t["recon"]["codebook"])
        assert np.any(t["cb"]["codebook"]) and any(np.any(g) for k, g in t["cm"].items() if k.startswith("enc"))

    def test_straight_through_identity(self, rng):
        m = _model(rng)
        v = rng.normal(size=(4, 6))
        _, _, fwd = compute_mq_losses(m, v, v)
        for gc, ge in zip(fwd.recon_grad_codeword, fwd.recon_grad_encoder_out):
            assert gc.tobytes() == ge.tobytes()

    def test_combined_is_sum_of_terms(self, rng):
        m = _model(rng)
        v = rng.normal(size=(4, 6))
        _, grads, fwd = compute_mq_losses(m, v, v, per_term=True)
        t = fwd.grads_by_term
        for k in grads:
            np.testing.assert_allclose(grads[k], t["recon"][k] + t["cb"][k] + m.beta * t["cm"][k], atol=1e-14)

    @pytest.mark.parametrize("quantization", ["kway", "residual"])
    def test_surrogate_finite_difference(self, rng, quantization):
        m = _model(rng, quantization=quantization)
        v = rng.normal(size=(4, 6))
        vm = apply_mask(v, MaskConfig(0.2), rng)
        _, grads, fwd = compute_mq_losses(m, v, vm)
        nets_err, cb_err = surrogate_fd_errors(m, v, vm, grads, fwd.codes)
        assert nets_err < 1e-4 and cb_err < 1e-4

    def test_one_cb_step_decreases_distance(self, rng):
        m = _model(rng)
        v = rng.normal(size=(6, 6))
        _, _, fwd = compute_mq_losses(m, v, v, per_term=True)
        g = fwd.grads_by_term["cb"]["codebook"]
        a = [enc(v) for enc in m.encoders]

        def dist():
            C = m.codebook.embeddings
            return sum(np.sum((a[k] - C[k, fwd.codes[:, k]]) ** 2) for k in range(3))

        before = dist()
        m.codebook.embeddings -= 1e-3 * g
        assert dist() < before


class TestTraining:
    def _small(self):
        X, labels = cluster_fixture(n=400, dim=16, n_clusters=4, seed=3)
        cfg = TokenizerTrainConfig(K=2, L=8, code_dim=8, hidden=32, epochs=15, batch_size=64, seed=5)
        return X, labels, cfg

    def test_recon_drops(self):
        X, labels, cfg = self._small()
        m = train_tokenizer(X, "item", cfg)
        rec = m.history["recon"]
        assert rec[-1] < 0.5 * rec[0]
        same, cross = code_sharing_rates(m.tokenize_batch(X), labels)
        assert same > cross

    def test_deterministic(self):
        X, _, cfg = self._small()
        a = train_tokenizer(X, "item", cfg)
        b = train_tokenizer(X, "item", cfg)
        assert a.codebook.embeddings.tobytes() == b.codebook.embeddings.tobytes()

    def test_codes_match_training_forward(self):
        X, _, cfg = self._small()
        m = train_tokenizer(X, "item", cfg)
        _, _, fwd = compute_mq_losses(m, X, X)
        assert np.array_equal(fwd.codes, m.tokenize_batch(X))

    def test_per_step_resampling_runs(self):
        X, _, cfg = self._small()
        from dataclasses import replace
        m = train_tokenizer(X[:100], "user", replace(cfg, resample="per_step", epochs=2))
        assert m.side == "user" and len(m.history["recon"]) == 3

    def test_empty_input(self):
        with pytest.raises(ValueError):
            train_tokenizer(np.zeros((0, 4)), "item")

    def test_default_codebook_size(self):
        assert default_codebook_size(3646) == 256
        assert default_codebook_size(39_387) == 512
