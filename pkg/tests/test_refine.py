import numpy as np
import pytest

import tsa.numerics as tn
from tsa.errors import ConfigError, ContractError
from tsa.graph import from_edge_pairs
from tsa.model import TrainConfig, forward, init_model
from tsa.refine import (
    RefineParams,
    entropy,
    refine,
    refine_lame,
    refine_t3a,
    refine_tent,
    row_entropy,
)
from tests.fd import fd_gradient, rel_err


def random_graph(n=12, p=0.35, classes=3, feat_dim=3, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    feats = rng.normal(size=(n, feat_dim))
    labels = rng.integers(0, classes, size=n)
    return from_edge_pairs(n, np.array(pairs), feats, labels, classes)


def small_model(g, seed=0):
    cfg = TrainConfig(hidden_dim=6, clf_hidden=5, num_layers=2, seed=seed)
    m = init_model(g.feat_dim, g.num_classes, cfg)
    rng = np.random.default_rng(seed + 50)
    m.classifier.bn_mean = rng.normal(scale=0.1, size=cfg.clf_hidden)
    m.classifier.bn_var = 1.0 + np.abs(rng.normal(scale=0.2, size=cfg.clf_hidden))
    return m


class TestEntropy:
    def test_one_hot(self):
        assert entropy(np.array([1.0, 0.0, 0.0])) == 0.0

    def test_uniform(self):
        assert entropy(np.array([1 / 3] * 3)) == pytest.approx(np.log(3), abs=1e-12)

    def test_two_mass(self):
        assert entropy(np.array([0.5, 0.5, 0.0])) == pytest.approx(np.log(2), abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(4))
            h = entropy(p)
            assert 0.0 <= h <= np.log(4) + 1e-12

    def test_bad_row(self):
        with pytest.raises(ContractError):
            entropy(np.array([0.5, 0.2]))


class TestTent:
    def test_zero_lr_keeps_predictions(self):
        g = random_graph(seed=1)
        m = small_model(g)
        before = forward(m, g).probs.data.copy()
        soft, _ = refine_tent(m, g, lr=0.0, steps=1)
        np.testing.assert_array_equal(soft, before)

    def test_descent_direction(self):
        g = random_graph(seed=2)
        m = small_model(g)
        clf = m.classifier
        n = g.num_nodes
        old_scale, old_shift = clf.bn_scale, clf.bn_shift
        with tn.Tape() as tape:
            fr = forward(m, g)
            ls = tn.log_softmax(fr.logits)
            loss = tn.smul(tn.tsum(tn.mul(tn.exp(ls), ls)), 1.0 / n)
            grads = tape.backward(loss)
        refine_tent(m, g, lr=1e-4, steps=1)
        step = np.concatenate([
            clf.bn_scale.data - old_scale.data, clf.bn_shift.data - old_shift.data
        ])
        grad_vec = np.concatenate([
            tn.grad_of(grads, p) for p in (old_scale, old_shift)
        ])
        directional = float(grad_vec @ step)
        assert directional <= 0.0
        if np.any(grad_vec != 0):
            assert directional < 0.0

    def test_only_bn_affine_mutates(self):
        g = random_graph(seed=3)
        m = small_model(g)
        others_before = [t.data.copy() for t in m.encoder.all() + m.classifier.non_bn_affine()]
        bn_before = m.classifier.bn_scale.data.copy()
        run_mean = m.classifier.bn_mean.copy()
        refine_tent(m, g, lr=0.05, steps=2)
        for before, after in zip(
            others_before, m.encoder.all() + m.classifier.non_bn_affine()
        ):
            np.testing.assert_array_equal(before, after.data)
        assert not np.array_equal(bn_before, m.classifier.bn_scale.data)
        np.testing.assert_array_equal(run_mean, m.classifier.bn_mean)

    def test_gradient_matches_finite_differences(self):
        g = random_graph(n=10, seed=4)
        m = small_model(g)
        clf = m.classifier
        n = g.num_nodes

        def loss_now():
            fr = forward(m, g)
            ls = tn.log_softmax(fr.logits)
            return float((np.exp(ls.data) * ls.data).sum() / n)

        with tn.Tape() as tape:
            fr = forward(m, g)
            ls = tn.log_softmax(fr.logits)
            loss = tn.smul(tn.tsum(tn.mul(tn.exp(ls), ls)), 1.0 / n)
            grads = tape.backward(loss)

        for name in ("bn_scale", "bn_shift"):
            p = getattr(clf, name)

            def loss_with(q, name=name, p=p):
                setattr(clf, name, q)
                try:
                    return loss_now()
                finally:
                    setattr(clf, name, p)

            numeric = fd_gradient(loss_with, p)
            assert rel_err(tn.grad_of(grads, p), numeric) <= 1e-4


class TestT3a:
    def test_support_capacity(self):
        g = random_graph(n=30, seed=5)
        m = small_model(g)
        emb = forward(m, g).penultimate.data
        _, info = refine_t3a(m, emb, m_capacity=1)
        assert all(s == 1 for s in info["support_sizes"])

    def test_matches_bruteforce_replay(self):
        """2-class toy with hand-placed clusters vs a literal re-simulation."""
        rng = np.random.default_rng(7)
        m = small_model(random_graph(n=4, classes=2, seed=6))
        dim = m.classifier.w2.shape[0]
        w2 = np.zeros((dim, 2))
        w2[0, 0], w2[0, 1] = 1.0, -1.0  # class vectors +e1 / -e1
        m.classifier.w2 = tn.param(w2)
        b2 = m.classifier.b2.data
        emb = np.vstack([
            np.eye(dim)[0] * (1 + 0.1 * rng.normal(size=8)[:, None]),
            -np.eye(dim)[0] * (1 + 0.1 * rng.normal(size=8)[:, None]),
        ])
        order = rng.permutation(16)
        emb = emb[order]
        got, _ = refine_t3a(m, emb, m_capacity=3)

        # independent replay of the streaming insertion/eviction sequence
        def softm(z):
            p = np.exp(z - z.max())
            return p / p.sum()

        def ent_of(p):
            return -(p[p > 0] * np.log(p[p > 0])).sum()

        def unit(v):
            n = np.linalg.norm(v)
            return v / n if n > 0 else v

        def replay(emb, w2, m_cap):
            k = w2.shape[1]
            supports = [[] for _ in range(k)]
            for c in range(k):
                p = softm(w2[:, c] @ w2 + b2)
                supports[c].append((unit(w2[:, c]), ent_of(p), -k + c))
            out = np.zeros((len(emb), k))
            for u, x in enumerate(emb):
                protos = np.stack([
                    unit(np.mean([e[0] for e in supports[c]], axis=0)) for c in range(k)
                ])
                out[u] = softm(protos @ x)
                p = softm(x @ w2 + b2)
                pred = int(np.argmax(p))
                supports[pred].append((unit(x), ent_of(p), u))
                supports[pred] = sorted(supports[pred], key=lambda e: (e[1], e[2]))[:m_cap]
            return out

        expected = replay(emb, w2, 3)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_exact_support_match_dominates(self):
        m = small_model(random_graph(n=4, classes=2, seed=8))
        dim = m.classifier.w2.shape[0]
        w2 = np.zeros((dim, 2))
        w2[0, 0] = 2.0   # class 0 prototype: strong +e1
        w2[1, 1] = 0.5   # class 1 prototype: weak +e2, orthogonal
        m.classifier.w2 = tn.param(w2)
        emb = w2[:, 0][None, :]  # equals class 0's sole support entry
        soft, _ = refine_t3a(m, emb, m_capacity=5)
        assert np.argmax(soft[0]) == 0

    def test_deterministic(self):
        g = random_graph(n=25, seed=9)
        m = small_model(g)
        emb = forward(m, g).penultimate.data
        a, _ = refine_t3a(m, emb, 5)
        b, _ = refine_t3a(m, emb, 5)
        np.testing.assert_array_equal(a, b)

    def test_bad_capacity(self):
        m = small_model(random_graph(seed=10))
        with pytest.raises(ConfigError):
            refine_t3a(m, np.zeros((3, m.classifier.w2.shape[0])), 0)


class TestLame:
    def test_no_neighbors_is_identity(self):
        import scipy.sparse as sp
        soft = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
        emb = np.random.default_rng(0).normal(size=(3, 4))
        out, _ = refine_lame(soft, emb, affinity=sp.csr_matrix((3, 3)))
        np.testing.assert_allclose(out, soft, atol=1e-12)

    def test_symmetric_pair(self):
        import scipy.sparse as sp
        w = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        soft = np.array([[0.6, 0.4], [0.6, 0.4]])
        out, _ = refine_lame(soft, np.ones((2, 3)), affinity=w, iters=5)
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)

    def test_single_iteration_hand_computation(self):
        import scipy.sparse as sp
        # 4-node chain with hand affinities
        w_dense = np.array([
            [0.0, 0.5, 0.0, 0.0],
            [0.5, 0.0, 0.25, 0.0],
            [0.0, 0.25, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
        soft = np.array([
            [0.9, 0.1],
            [0.6, 0.4],
            [0.3, 0.7],
            [0.2, 0.8],
        ])
        out, _ = refine_lame(soft, np.ones((4, 2)), affinity=sp.csr_matrix(w_dense), iters=1)
        logits = np.log(soft) + w_dense @ soft
        expected = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_rows_remain_distributions(self):
        g = random_graph(n=40, seed=11)
        m = small_model(g)
        fr = forward(m, g)
        out, _ = refine_lame(fr.probs.data, fr.embeddings.data, k_nn=5, iters=10)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out >= 0)


class TestDispatch:
    @pytest.mark.parametrize("method", ["tent", "t3a", "lame"])
    def test_row_stochastic_output(self, method):
        g = random_graph(n=20, seed=12)
        m = small_model(g)
        out = refine(m, g, method, RefineParams(tent_lr=0.01, t3a_m=5))
        np.testing.assert_allclose(out.soft.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out.soft >= -1e-15)
        if method == "tent":
            assert out.mutated_params == ("bn_scale", "bn_shift")
        else:
            assert out.mutated_params == ()

    def test_unknown_method(self):
        g = random_graph(seed=13)
        with pytest.raises(ConfigError):
            refine(small_model(g), g, "notamethod")
