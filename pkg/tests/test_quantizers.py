import numpy as np
import pytest

from mqrec.quantizers import KMeansTokenizer, ablation_quantize, kmeans, residual_quantize
from mqrec.tokenizer import TokenizerTrainConfig, train_tokenizer

from _support import cluster_fixture

SMALL = TokenizerTrainConfig(K=2, L=8, code_dim=4, hidden=16, epochs=3, batch_size=64, seed=2)


class TestResidual:
    def test_level_two_input_is_residual(self):
        C1 = np.array([[0.6, 0.0], [-5.0, 0.0]])
        C2 = np.array([[0.4, 0.0], [0.0, 0.0]])
        codes, inputs, rest = residual_quantize([C1, C2], np.array([1.0, 0.0]))
        assert codes[0].tolist() == [0, 0]
        np.testing.assert_allclose(inputs[1][0], [0.4, 0.0])
        np.testing.assert_allclose(rest[0], [0.0, 0.0], atol=1e-15)

    def test_rq_k1_equals_vq_single(self):
        X, _ = cluster_fixture(n=200, dim=8, n_clusters=4, seed=1)
        cfg = TokenizerTrainConfig(K=1, L=8, code_dim=4, hidden=16, rho=0.0, epochs=3, batch_size=50, seed=3)
        kway = train_tokenizer(X, "item", cfg)
        from dataclasses import replace
        rq = train_tokenizer(X, "item", replace(cfg, quantization="residual"))
        assert np.array_equal(kway.tokenize_batch(X), rq.tokenize_batch(X))
        assert kway.codebook.embeddings.tobytes() == rq.codebook.embeddings.tobytes()


class TestKMeans:
    def test_zero_iterations_own_centroid(self, rng):
        X = rng.normal(size=(30, 3))
        init = [4, 9, 17]
        C, assign = kmeans(X, 3, iters=0, init=init)
        assert assign[init].tolist() == [0, 1, 2]
        np.testing.assert_array_equal(C, X[init])

    def test_converges_on_separated_blobs(self):
        X, labels = cluster_fixture(n=300, dim=4, n_clusters=3, sigma=0.05, seed=7)
        _, assign = kmeans(X, 3, iters=50, init=[int(np.flatnonzero(labels == c)[0]) for c in range(3)])
        for c in range(3):
            assert len(set(assign[labels == c])) == 1

    def test_empty_cluster_reseeded_to_farthest(self):
        X = np.array([[0.0], [0.1], [0.2], [10.0]])
        # duplicate starting centroids: the second one gets no points
        C, assign = kmeans(X, 2, iters=1, init=[0, 0])
        assert 10.0 in C[:, 0]
        assert assign[3] != assign[0]

    def test_tokenizer_slices(self, rng):
        X = rng.normal(size=(100, 10))
        km = KMeansTokenizer.fit(X, K=3, L=4, iters=5)
        codes = km.tokenize_batch(X)
        assert codes.shape == (100, 3) and codes.max() < 4
        assert sum(s.stop - s.start for s in km.slices) == 10
        assert km.reconstruct(codes).shape == X.shape


class TestAblation:
    @pytest.mark.parametrize("mode", ["vq_single", "rq_residual", "kmeans"])
    def test_modes(self, mode):
        X, _ = cluster_fixture(n=150, dim=8, n_clusters=3, seed=2)
        res = ablation_quantize(mode, X, "item", SMALL)
        k = 1 if mode == "vq_single" else 2
        assert res.codes.shape == (150, k)
        assert res.recon_mse >= 0 and np.isfinite(res.recon_mse)
        assert len(res.token_map()) == 150

    def test_vq_single_is_unmasked_single_codebook(self):
        X, _ = cluster_fixture(n=120, dim=8, n_clusters=3, seed=2)
        res = ablation_quantize("vq_single", X, "item", SMALL)
        assert res.model.K == 1 and res.model.mask.rho == 0.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ablation_quantize("pq", np.zeros((3, 2)))
