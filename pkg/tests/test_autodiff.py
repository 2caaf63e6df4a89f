import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionxai import autodiff as ad


def _rand(rng, shape, dtype=np.float64):
    return rng.standard_normal(shape).astype(dtype)


def _chain_graph(rng, n_channels=2, dtype=np.float64):
    """conv -> relu -> conv with random weights, single output."""
    g = ad.GraphBuilder()
    g.input("in", channels=n_channels)
    g.conv3d("c1", "in", _rand(rng, (3, n_channels, 3, 3, 3), dtype) * 0.4)
    g.relu("r1", "c1")
    g.conv3d("c2", "r1", _rand(rng, (2, 3, 3, 3, 3), dtype) * 0.4)
    return g.build("c2")


def random_small_graph(rng, dtype=np.float64):
    """Random graph of at most 4 layers drawn from the supported layer set."""
    g = ad.GraphBuilder()
    g.input("in", channels=2)
    cur, c = "in", 2
    n_layers = int(rng.integers(1, 5))
    kinds = ["conv3d", "relu", "poolpair", "branch"]
    for i in range(n_layers):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "conv3d":
            co = int(rng.integers(1, 4))
            g.conv3d(f"c{i}", cur, _rand(rng, (co, c, 3, 3, 3), dtype) * 0.4,
                     bias=_rand(rng, (co,), dtype) * 0.1)
            cur, c = f"c{i}", co
        elif kind == "relu":
            g.relu(f"r{i}", cur)
            cur = f"r{i}"
        elif kind == "poolpair":
            g.maxpool(f"p{i}", cur)
            g.conv_transpose3d(f"u{i}", f"p{i}", _rand(rng, (c, c, 2, 2, 2), dtype) * 0.4)
            cur = f"u{i}"
        else:
            co = int(rng.integers(1, 3))
            g.conv3d(f"b{i}", cur, _rand(rng, (co, c, 1, 1, 1), dtype) * 0.5)
            g.conv3d(f"d{i}", cur, _rand(rng, (co, c, 3, 3, 3), dtype) * 0.3)
            g.add(f"a{i}", f"b{i}", f"d{i}")
            cur, c = f"a{i}", co
    # final head keeps the spatial contract
    g.conv3d("head", cur, _rand(rng, (2, c, 1, 1, 1), dtype) * 0.5)
    return g.build("head")


class TestFiniteDifferences:
    def test_chain_graph_matches_fd(self):
        rng = np.random.default_rng(0)
        graph = _chain_graph(rng)
        x = _rand(rng, (2, 6, 6, 6))
        report = ad.finite_difference_check(graph, {"in": x}, rng=rng)
        assert report.max_rel_err <= 1e-6

    def test_random_graphs_match_fd(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(10):
            graph = random_small_graph(rng)
            x = _rand(rng, (2, 8, 8, 8))
            report = ad.finite_difference_check(graph, {"in": x}, rng=rng)
            worst = max(worst, report.max_rel_err)
        assert worst <= 1e-4

    def test_fd_requires_float64(self):
        rng = np.random.default_rng(0)
        graph = _chain_graph(rng, dtype=np.float32)
        with pytest.raises(ad.GraphError):
            ad.finite_difference_check(graph, {"in": _rand(rng, (2, 6, 6, 6), np.float32)})


class TestBackward:
    def test_linearity_in_seed(self):
        rng = np.random.default_rng(1)
        graph = _chain_graph(rng)
        tape = ad.forward(graph, {"in": _rand(rng, (2, 6, 6, 6))})
        s1 = _rand(rng, tape.output.shape)
        s2 = _rand(rng, tape.output.shape)
        g1 = ad.backward(tape, s1).node_grads["in"]
        g2 = ad.backward(tape, s2).node_grads["in"]
        g12 = ad.backward(tape, 2.0 * s1 + 3.0 * s2).node_grads["in"]
        assert np.allclose(g12, 2.0 * g1 + 3.0 * g2, atol=1e-10)

    def test_batched_seeds_equal_sequential(self):
        rng = np.random.default_rng(2)
        graph = _chain_graph(rng)
        tape = ad.forward(graph, {"in": _rand(rng, (2, 6, 6, 6))})
        seeds = _rand(rng, (5,) + tape.output.shape)
        batched = ad.backward(tape, seeds).node_grads["in"]
        for i in range(5):
            single = ad.backward(tape, seeds[i]).node_grads["in"]
            assert np.array_equal(batched[i], single)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        graph = _chain_graph(rng)
        x = _rand(rng, (2, 6, 6, 6))
        seed = None
        grads = []
        for _ in range(2):
            tape = ad.forward(graph, {"in": x})
            if seed is None:
                seed = np.ones_like(tape.output)
            grads.append(ad.backward(tape, seed).node_grads["in"])
        assert np.array_equal(grads[0], grads[1])

    def test_param_grads_match_fd(self):
        rng = np.random.default_rng(4)
        graph = _chain_graph(rng)
        x = _rand(rng, (2, 6, 6, 6))
        tape = ad.forward(graph, {"in": x})
        seed = np.ones_like(tape.output)
        bres = ad.backward(tape, seed, with_params=True)
        node = graph.by_id["c2"]
        w = node.weight
        eps = 1e-6
        idx = (1, 2, 0, 1, 2)
        w[idx] += eps
        up = ad.forward(graph, {"in": x}).output.sum()
        w[idx] -= 2 * eps
        dn = ad.forward(graph, {"in": x}).output.sum()
        w[idx] += eps
        fd = (up - dn) / (2 * eps)
        assert abs(bres.param_grads["c2"]["weight"][idx] - fd) < 1e-5

    def test_nonfinite_input_raises(self):
        rng = np.random.default_rng(5)
        graph = _chain_graph(rng)
        x = _rand(rng, (2, 6, 6, 6))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ad.NonFiniteError):
            ad.forward(graph, {"in": x})


class TestGraphValidation:
    def test_even_kernel_rejected(self):
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        with pytest.raises(ad.GraphError):
            g.conv3d("c", "in", np.zeros((1, 1, 2, 2, 2)))
            g.build("c")

    def test_unknown_source_rejected(self):
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        g.relu("r", "nope")
        with pytest.raises(ad.GraphError):
            g.build("r")

    def test_duplicate_id_rejected(self):
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        with pytest.raises(ad.GraphError):
            g.relu("in", "in")
            g.build("in")


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        g = ad.GraphBuilder()
        g.input("in", channels=3)
        g.softmax("s", "in")
        graph = g.build("s")
        out = ad.forward(graph, {"in": _rand(rng, (3, 4, 4, 4))}).output
        assert np.allclose(out.sum(axis=0), 1.0)
        assert np.all(out >= 0)


class TestReceptiveField:
    def test_single_conv(self):
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        g.conv3d("c", "in", np.zeros((1, 1, 3, 3, 3)))
        assert ad.receptive_field(g.build("c")) == (1, 1, 1)

    def test_two_convs_compose(self):
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        g.conv3d("c1", "in", np.zeros((1, 1, 3, 3, 3)))
        g.conv3d("c2", "c1", np.zeros((1, 1, 5, 5, 5)))
        assert ad.receptive_field(g.build("c2")) == (3, 3, 3)

    def test_pool_upsample_pair(self):
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        g.conv3d("c1", "in", np.zeros((1, 1, 3, 3, 3)))
        g.maxpool("p", "c1")
        g.conv3d("c2", "p", np.zeros((1, 1, 3, 3, 3)))
        g.conv_transpose3d("u", "c2", np.zeros((1, 1, 2, 2, 2)))
        graph = g.build("u")
        assert ad.alignment(graph) == 2
        # radius 1 at jump 1, then radius 2 at jump 2, pool adds reach
        assert ad.receptive_field(graph) == (4, 4, 4)

    def test_rf_matches_empirical_support(self):
        rng = np.random.default_rng(8)
        graph = random_small_graph(rng)
        radius = max(ad.receptive_field(graph))
        e = 16
        x = np.zeros((2, e, e, e))
        tape = ad.forward(graph, {"in": x})
        seed = np.zeros_like(tape.output)
        seed[0, e // 2, e // 2, e // 2] = 1.0
        g_in = ad.backward(tape, seed).node_grads["in"]
        nz = np.argwhere(np.abs(g_in).sum(axis=0) > 0)
        if len(nz):
            cheb = np.abs(nz - e // 2).max()
            assert cheb <= radius


@settings(max_examples=20, deadline=None)
@given(
    cz=st.integers(4, 7),
    cy=st.integers(4, 7),
    cx=st.integers(4, 7),
    seed=st.integers(0, 10 ** 6),
)
def test_relu_maxpool_grad_is_subset_mask(cz, cy, cx, seed):
    """relu backward only passes gradient where the input was positive."""
    rng = np.random.default_rng(seed)
    g = ad.GraphBuilder()
    g.input("in", channels=1)
    g.relu("r", "in")
    graph = g.build("r")
    x = rng.standard_normal((1, cz, cy, cx)).astype(np.float32)
    tape = ad.forward(graph, {"in": x})
    gy = rng.standard_normal(tape.output.shape).astype(np.float32)
    gx = ad.backward(tape, gy).node_grads["in"]
    assert np.array_equal(gx, gy * (x > 0))
