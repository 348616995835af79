import numpy as np
import pytest

from mqrec.cf import (CfTrainConfig, EmbeddingTable, TrainingError, bpr_loss, build_graph,
                      extend_for_new_entities, propagate_lightgcn, train_cf, validation_hit_ratio)
from mqrec.data import DatasetSplit
from mqrec.diffcore import finite_difference_check


def _split(train, n_items=None, test=None):
    n = len(train)
    m = n_items if n_items is not None else 1 + max(j for h in train for j in h)
    return DatasetSplit(n, m, [list(h) for h in train], [None] * n, test or [None] * n)


def _dense_adjacency(split):
    """Independent oracle: normalized adjacency built entry by entry."""
    n, m = split.n_users, split.n_items
    A = np.zeros((n + m, n + m))
    du = np.array([len(h) for h in split.train], dtype=float)
    di = np.zeros(m)
    for h in split.train:
        for j in h:
            di[j] += 1
    for u, h in enumerate(split.train):
        for j in h:
            A[u, n + j] = A[n + j, u] = 1.0 / np.sqrt(du[u] * di[j])
    return A


class TestGraph:
    def test_single_edge(self):
        g = build_graph(_split([[0]]))
        assert g.coef.tolist() == [1.0]
        assert g.user_degree.tolist() == [1.0] and g.item_degree.tolist() == [1.0]

    def test_two_edges_one_user(self):
        g = build_graph(_split([[0, 1]]))
        np.testing.assert_allclose(g.coef, [1 / np.sqrt(2)] * 2)

    def test_empty_train(self):
        with pytest.raises(ValueError):
            build_graph(_split([[]], n_items=3))

    def test_adjacency_matches_dense_oracle(self, rng):
        train = [list(rng.choice(12, size=rng.integers(1, 6), replace=False)) for _ in range(9)]
        s = _split(train, 12)
        np.testing.assert_allclose(build_graph(s).adjacency().toarray(), _dense_adjacency(s), atol=1e-15)


class TestPropagation:
    def test_zero_layers_identity(self, rng):
        e0 = EmbeddingTable(rng.normal(size=(2, 3)), rng.normal(size=(4, 3)))
        out = propagate_lightgcn(build_graph(_split([[0, 1], [2, 3]])), e0, 0)
        assert np.array_equal(out.user_vectors, e0.user_vectors)
        assert np.array_equal(out.item_vectors, e0.item_vectors)

    def test_two_node_graph(self):
        e0 = EmbeddingTable(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        out = propagate_lightgcn(build_graph(_split([[0]])), e0, 1)
        np.testing.assert_allclose(out.user_vectors, [[0.5, 0.5]])
        np.testing.assert_allclose(out.item_vectors, [[0.5, 0.5]])

    def test_isolated_node_scaled(self):
        e0 = EmbeddingTable(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [3.0, 4.0]]))
        out = propagate_lightgcn(build_graph(_split([[0]], 2)), e0, 1)
        np.testing.assert_allclose(out.item_vectors[1], [1.5, 2.0])

    def test_matches_dense_layer_mean(self, rng):
        train = [list(rng.choice(8, size=rng.integers(1, 5), replace=False)) for _ in range(6)]
        s = _split(train, 8)
        E = rng.normal(size=(14, 4))
        A = _dense_adjacency(s)
        layers = [E]
        for _ in range(3):
            layers.append(A @ layers[-1])
        expected = np.mean(layers, axis=0)
        out = propagate_lightgcn(build_graph(s), EmbeddingTable(E[:6], E[6:]), 3)
        np.testing.assert_allclose(np.vstack([out.user_vectors, out.item_vectors]), expected, atol=1e-12)

    def test_linear_in_input(self, rng):
        s = _split([[0, 2], [1], [2, 3]])
        g = build_graph(s)
        e0 = EmbeddingTable(rng.normal(size=(3, 5)), rng.normal(size=(4, 5)))
        scaled = EmbeddingTable(2.5 * e0.user_vectors, 2.5 * e0.item_vectors)
        a, b = propagate_lightgcn(g, e0, 3), propagate_lightgcn(g, scaled, 3)
        np.testing.assert_allclose(b.user_vectors, 2.5 * a.user_vectors, atol=1e-10)

    def test_negative_layers(self, rng):
        e0 = EmbeddingTable(np.ones((1, 2)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            propagate_lightgcn(build_graph(_split([[0]])), e0, -1)


class TestBpr:
    def test_zero_gap(self):
        assert bpr_loss(0.0) == pytest.approx(np.log(2.0))

    def test_large_gap_vanishes(self):
        assert bpr_loss(50.0) < 1e-20
        assert np.isfinite(bpr_loss(-1e4))

    def test_monotone_decreasing(self, rng):
        gaps = np.sort(rng.normal(scale=5, size=500))
        assert np.all(np.diff(bpr_loss(gaps)) <= 0)


def _random_split(rng, n=30, m=40, per_user=6):
    train = [list(rng.choice(m, size=per_user, replace=False)) for _ in range(n)]
    test = [int(rng.choice([j for j in range(m) if j not in h])) for h in train]
    val = [int(rng.choice([j for j in range(m) if j not in h and j != t])) for h, t in zip(train, test)]
    return DatasetSplit(n, m, train, val, test)


class TestTrainCf:
    def test_reproducible(self, rng):
        s = _random_split(rng)
        cfg = CfTrainConfig(dim=8, epochs=4, batch_size=32, eval_every=2)
        a, b = train_cf(s, cfg), train_cf(s, cfg)
        assert a.user_vectors.tobytes() == b.user_vectors.tobytes()
        assert a.item_vectors.tobytes() == b.item_vectors.tobytes()

    def test_gradient_of_batch_objective(self, rng):
        # the analytic BPR + L2 gradient used in training, checked against finite differences
        from mqrec.cf import _propagate

        s = _random_split(rng, n=5, m=7, per_user=3)
        adj = build_graph(s).adjacency()
        E = {"E": rng.normal(scale=0.3, size=(12, 4))}
        bu, bp, bn = np.array([0, 1, 3]), np.array([5, 6, 9]), np.array([11, 7, 8])
        l2 = 0.1

        def f():
            fin = _propagate(adj, E["E"], 3)
            gap = np.einsum("ij,ij->i", fin[bu], fin[bp] - fin[bn])
            reg = 0.5 * sum(np.sum(E["E"][i] ** 2) for i in (bu, bp, bn)) / 3
            return float(np.mean(bpr_loss(gap)) + l2 * reg)

        fin = _propagate(adj, E["E"], 3)
        eu, ep, en = fin[bu], fin[bp], fin[bn]
        sig = 1 / (1 + np.exp(np.einsum("ij,ij->i", eu, ep - en)))
        g = np.zeros_like(E["E"])
        for r in range(3):
            g[bu[r]] += -sig[r] / 3 * (ep[r] - en[r])
            g[bp[r]] += -sig[r] / 3 * eu[r]
            g[bn[r]] += sig[r] / 3 * eu[r]
        grad = _propagate(adj, g, 3)
        for i in (bu, bp, bn):
            for r in i:
                grad[r] += l2 / 3 * E["E"][r]
        assert finite_difference_check(f, E, {"E": grad}) < 1e-4

    def test_learns_block_structure(self):
        # two disjoint communities: held-out items should be found far above chance
        rng = np.random.default_rng(1)
        train, test = [], []
        for u in range(60):
            block = np.arange(0, 20) if u < 30 else np.arange(20, 40)
            h = list(rng.choice(block, size=9, replace=False))
            train.append(h[:-1])
            test.append(int(h[-1]))
        s = DatasetSplit(60, 40, train, [None] * 60, test)
        t = train_cf(s, CfTrainConfig(dim=16, epochs=60, batch_size=64, lr=0.01, eval_every=0))
        hr = validation_hit_ratio(s, t.user_vectors, t.item_vectors, k=10, which="test")
        assert hr > 0.6  # chance is 10/32

    def test_mf_is_zero_layer(self, rng):
        s = _random_split(rng)
        t = train_cf(s, CfTrainConfig(method="mf_bpr", dim=8, epochs=2, eval_every=0))
        assert np.array_equal(t.user_vectors, t.base_users)

    def test_divergence_raises(self, rng):
        s = _random_split(rng)
        with pytest.raises(TrainingError, match="epoch 0"), np.errstate(all="ignore"):
            train_cf(s, CfTrainConfig(dim=4, epochs=2, init_std=np.inf, eval_every=0))

    def test_bad_method(self):
        with pytest.raises(ValueError):
            CfTrainConfig(method="gtn")


class TestExtend:
    def test_no_new_entities_keeps_shape(self, rng):
        s = _random_split(rng)
        cfg = CfTrainConfig(dim=8, epochs=5, eval_every=0)
        old = train_cf(s, cfg)
        new = extend_for_new_entities(old, s, cfg)
        assert new.user_vectors.shape == old.user_vectors.shape

    def test_one_new_user(self, rng):
        s = _random_split(rng)
        cfg = CfTrainConfig(dim=8, epochs=5, eval_every=0)
        old = train_cf(s, cfg)
        bigger = DatasetSplit(s.n_users + 1, s.n_items, s.train + [[0, 1]], s.validation + [None],
                              s.test + [None])
        new = extend_for_new_entities(old, bigger, cfg)
        assert new.n_users == old.n_users + 1
        assert np.all(np.isfinite(new.user_vectors[-1])) and np.any(new.user_vectors[-1] != 0)

    def test_shrunken_universe(self, rng):
        s = _random_split(rng)
        cfg = CfTrainConfig(dim=8, epochs=1, eval_every=0)
        old = train_cf(s, cfg)
        smaller = DatasetSplit(s.n_users - 1, s.n_items, s.train[:-1], s.validation[:-1], s.test[:-1])
        with pytest.raises(ValueError):
            extend_for_new_entities(old, smaller, cfg)
