import numpy as np
import pytest
import scipy.sparse as sp

from crossfuse.auxnet import (Affine, AuxEncoder, AuxGcnStack, build_extractor,
                              gcn_forward, load_dense_matrix, mlp_forward,
                              save_dense_matrix, squared_score_loss,
                              stage1_loss_and_grad)


def loop_graph(weights: np.ndarray) -> sp.csr_matrix:
    """Similarity-like graph: given off-diagonal weights, unit self-loops."""
    size = weights.shape[0]
    return sp.csr_matrix(weights + np.eye(size))


class TestEncoder:
    def test_single_layer_is_plain_affine(self):
        rng = np.random.default_rng(0)
        enc = AuxEncoder([5, 3], rng)
        x = rng.normal(size=(4, 5))
        out = enc.forward(x, "eval")
        w, b = enc.blocks[0].w.value, enc.blocks[0].b.value
        assert np.allclose(out, x @ w + b)

    def test_zero_weights_collapse_to_final_bias(self):
        rng = np.random.default_rng(1)
        enc = AuxEncoder([4, 6, 2], rng)
        for block in enc.blocks:
            if isinstance(block, Affine):
                block.w.value[...] = 0.0
        enc.blocks[-1].b.value[...] = np.array([3.0, -1.0])
        out = enc.forward(np.ones((5, 4)), "eval")
        assert np.allclose(out, [3.0, -1.0])

    def test_eval_with_batch_stats_matches_train_output(self):
        rng = np.random.default_rng(2)
        enc = AuxEncoder([6, 5, 3], rng)
        x = rng.normal(size=(10, 6))
        train_out = enc.forward(x, "train")
        # force running statistics to the batch statistics the train pass used
        h = x @ enc.blocks[0].w.value + enc.blocks[0].b.value
        bn = enc.blocks[1]
        bn.running_mean = h.mean(axis=0)
        bn.running_var = h.var(axis=0)
        eval_out = enc.forward(x, "eval")
        assert np.max(np.abs(train_out - eval_out)) <= 1e-10

    def test_batch_of_one_rejected_in_train_mode(self):
        enc = AuxEncoder([4, 4, 2], np.random.default_rng(0))
        with pytest.raises(ValueError, match="at least 2 rows"):
            enc.forward(np.ones((1, 4)), "train")

    def test_width_mismatch_rejected(self):
        enc = AuxEncoder([4, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            enc.forward(np.ones((3, 5)), "eval")

    def test_eval_mode_deterministic_and_batch_independent(self):
        rng = np.random.default_rng(3)
        enc = AuxEncoder([5, 4, 3], rng)
        enc.forward(rng.normal(size=(8, 5)), "train")  # sets running stats
        x = rng.normal(size=(6, 5))
        one = enc.forward(x, "eval")
        again = np.vstack([enc.forward(x[:3], "eval"), enc.forward(x[3:], "eval")])
        assert np.allclose(one, again)

    def test_hidden_activations_non_negative(self):
        rng = np.random.default_rng(4)
        enc = AuxEncoder([6, 5, 4, 2], rng)
        x = rng.normal(size=(9, 6))
        enc.forward(x, "train")
        # final affine input is the last rectifier output, cached by Affine
        assert np.all(enc.blocks[-1]._x >= 0)

    def test_running_variance_stays_positive(self):
        rng = np.random.default_rng(5)
        enc = AuxEncoder([4, 3, 2], rng)
        for _ in range(20):
            enc.forward(rng.normal(size=(6, 4)), "train")
        for bn in enc.batch_norms():
            assert np.all(bn.running_var > 0)


class TestGcnStack:
    def test_self_loop_only_node(self):
        rng = np.random.default_rng(0)
        stack = AuxGcnStack(3, 1, rng)
        sim = loop_graph(np.zeros((4, 4)))
        h = rng.normal(size=(4, 3))
        out = stack.forward(sim, h, "train")
        # node 0 aggregates only itself: output equals the transform of its own feature
        affine, bn, relu = stack.layers[0]
        expect = relu.forward(bn.forward(affine.forward(h, True), True), True)
        assert np.allclose(out[0], expect[0])

    def test_identity_transform_hand_aggregation(self):
        rng = np.random.default_rng(1)
        stack = AuxGcnStack(2, 1, rng, bn_eps=0.0)
        affine, bn, relu = stack.layers[0]
        affine.w.value[...] = np.eye(2)
        affine.b.value[...] = 0.0
        off = np.zeros((2, 2))
        off[0, 1] = off[1, 0] = 0.25
        sim = loop_graph(off)
        h = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = stack.forward(sim, h, "eval")  # running stats are identity at init
        assert np.allclose(out[0], h[0] + 0.25 * h[1])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        off = (rng.random((15, 15)) < 0.2) * rng.random((15, 15))
        off = np.triu(off, 1)
        off = off + off.T
        sim = loop_graph(off)
        stack = AuxGcnStack(4, 2, rng)
        h = rng.normal(size=(15, 4))
        out = stack.forward(sim, h, "train")
        dense = sim.toarray()
        cur = h
        for affine, bn, relu in stack.layers:
            agg = dense @ cur
            z = agg @ affine.w.value + affine.b.value
            mu, var = z.mean(0), z.var(0)
            zh = (z - mu) / np.sqrt(var + bn.eps)
            cur = np.maximum(bn.gamma.value * zh + bn.beta.value, 0.0)
        assert np.max(np.abs(out - cur)) <= 1e-10

    def test_zero_layers_pass_through(self):
        stack = AuxGcnStack(3, 0, np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(5, 3))
        out = stack.forward(loop_graph(np.zeros((5, 5))), h, "train")
        assert out is h

    def test_missing_self_loops_rejected(self):
        stack = AuxGcnStack(2, 1, np.random.default_rng(0))
        sim = sp.csr_matrix(np.array([[1.0, 0.2], [0.2, 0.0]]))
        with pytest.raises(ValueError, match="self-loops"):
            stack.forward(sim, np.ones((2, 2)), "train")

    def test_functional_aliases(self):
        rng = np.random.default_rng(0)
        enc = AuxEncoder([3, 2], rng)
        x = rng.normal(size=(4, 3))
        assert np.allclose(mlp_forward(enc, x, "eval"), enc.forward(x, "eval"))
        stack = AuxGcnStack(2, 0, rng)
        sim = loop_graph(np.zeros((4, 4)))
        h = np.ascontiguousarray(x[:, :2])
        assert gcn_forward(stack, sim, h, "eval") is h


class TestStage1Loss:
    def test_exact_fit_gives_zero(self):
        a_u = np.array([[1.0, 0.0]])
        a_v = np.array([[1.0, 0.0]])
        loss, dAu, dAv = squared_score_loss(a_u, a_v, [[0, 0, 1.0]])
        assert loss == 0.0
        assert np.all(dAu == 0) and np.all(dAv == 0)

    def test_hand_computed_pair(self):
        a_u = np.array([[1.0, 2.0]])
        a_v = np.array([[3.0, -1.0]])
        loss, _, _ = squared_score_loss(a_u, a_v, [[0, 0, 0.0]])
        assert loss == pytest.approx(1.0)  # (3 - 2 - 0)^2

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        n, m, d = 6, 6, 3
        x_u = rng.normal(size=(n, 5))
        x_v = rng.normal(size=(m, 4))
        sim_u = loop_graph(np.triu((rng.random((n, n)) < 0.3) * rng.random((n, n)), 1))
        sim_u = sp.csr_matrix(sim_u + sp.triu(sim_u, 1).T)
        sim_v = loop_graph(np.zeros((m, m)))
        user_net = build_extractor(5, d, [4], 1, rng, name="u")
        item_net = build_extractor(4, d, [4], 1, rng, name="v")
        batch = np.array([[u, (u + 1) % m, float(u % 2)] for u in range(n)])

        user_net.forward(x_u, sim_u, "train")
        item_net.forward(x_v, sim_v, "train")
        user_net.zero_grad()
        item_net.zero_grad()
        stage1_loss_and_grad(user_net, item_net, batch)

        def loss():
            au = user_net.forward(x_u, sim_u, "train")
            av = item_net.forward(x_v, sim_v, "train")
            val, _, _ = squared_score_loss(au, av, batch)
            return val

        h = 1e-6
        for p in user_net.params() + item_net.params():
            flat = p.value.ravel()
            idx = np.random.default_rng(0).choice(flat.size, size=min(6, flat.size),
                                                  replace=False)
            for k in idx:
                keep = flat[k]
                flat[k] = keep + h
                up = loss()
                flat[k] = keep - h
                down = loss()
                flat[k] = keep
                fd = (up - down) / (2 * h)
                got = p.grad.ravel()[k]
                assert abs(got - fd) / max(1.0, abs(got), abs(fd)) <= 1e-5, p.name

    def test_backward_without_forward_rejected(self):
        rng = np.random.default_rng(0)
        a = build_extractor(3, 2, [3], 0, rng)
        b = build_extractor(3, 2, [3], 0, rng)
        with pytest.raises(ValueError, match="forward"):
            stage1_loss_and_grad(a, b, [[0, 0, 1.0]])

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            squared_score_loss(np.ones((2, 2)), np.ones((2, 2)), np.zeros((0, 3)))


class TestExtractor:
    def test_zero_conv_layers_returns_encoder_output(self):
        rng = np.random.default_rng(1)
        net = build_extractor(6, 3, [5], 0, rng)
        x = rng.normal(size=(7, 6))
        sim = loop_graph(np.zeros((7, 7)))
        a = net.forward(x, sim, "eval")
        a_prime = net.encoder.forward(x, "eval")
        assert np.array_equal(a, a_prime)

    def test_state_arrays_roundtrip(self):
        rng = np.random.default_rng(2)
        net = build_extractor(4, 2, [3], 1, rng)
        x = rng.normal(size=(5, 4))
        sim = loop_graph(np.zeros((5, 5)))
        net.forward(x, sim, "train")
        state = {k: v.copy() for k, v in net.state_arrays("side").items()}
        fresh = build_extractor(4, 2, [3], 1, np.random.default_rng(99))
        fresh.load_state_arrays("side", state)
        assert np.allclose(net.forward(x, sim, "eval"), fresh.forward(x, sim, "eval"))


class TestDenseMatrixFile:
    def test_roundtrip(self, tmp_path):
        mat = np.random.default_rng(0).normal(size=(6, 4))
        path = tmp_path / "feat.mat"
        save_dense_matrix(path, mat)
        back = load_dense_matrix(path)
        assert np.array_equal(mat, back)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bad.mat"
        save_dense_matrix(path, np.ones((3, 3)))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="size mismatch"):
            load_dense_matrix(path)
