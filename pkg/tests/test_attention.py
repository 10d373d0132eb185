import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.attention import (AttentionHeadParams, MultiHeadParams, attention_head, directional_attention,
                           multi_head_attention, static_attention, step_attention)
from src.errors import ConfigurationError, DimensionError
from src.graph import SensorGraph, build_graph
from src.numerics import ComputationTape, Parameter, Tensor, finite_difference_check, total
from tests.conftest import random_graph


def test_row_stochastic_on_support_over_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 21))
        k = int(rng.integers(1, 4))
        g = random_graph(rng, n, density=rng.uniform(0.0, 0.6))
        p = MultiHeadParams.init(rng, k, int(rng.integers(1, 5)), int(rng.integers(1, 4)), "att")
        att = directional_attention(rng.normal(size=(n, k)) * 3, g, p)

        for a, nb in ((att.a_out.data, g.out_neighbors), (att.a_in.data, g.in_neighbors)):
            mask = nb.support.mask
            assert_allclose(a.sum(axis=1), np.ones(n), atol=1e-9)
            assert np.all(a[~mask] == 0.0)
            assert np.all(a[mask] > 0.0)


def test_in_direction_follows_transposed_edges(micro_graph):
    rng = np.random.default_rng(1)
    p = MultiHeadParams.init(rng, 2, 3, 2, "att")
    att = directional_attention(rng.normal(size=(4, 2)), micro_graph, p)
    adj = np.asarray(micro_graph.adjacency).astype(bool) | np.eye(4, dtype=bool)
    assert np.all(att.a_out.data[~adj] == 0.0)
    assert np.all(att.a_in.data[~adj.T] == 0.0)


def test_self_only_neighborhood_gives_unit_weight():
    g = build_graph([('a', 'b', 10.0)], 3000.0, vertex_ids=['a', 'b', 'c'])
    p = MultiHeadParams.init(np.random.default_rng(2), 1, 2, 1, "att")
    att = directional_attention(np.array([[1.0], [2.0], [3.0]]), g, p)
    assert_allclose(att.a_out.data[2], [0.0, 0.0, 1.0])
    assert_allclose(att.a_out.data[1], [0.0, 1.0, 0.0])


def test_single_head_matches_hand_computation(micro_graph):
    rng = np.random.default_rng(3)
    head = AttentionHeadParams.init(rng, 2, 2, "h")
    x = rng.normal(size=(4, 2))
    a = attention_head(x, micro_graph.out_neighbors, head).data

    W, v = head.W.data, head.v.data
    expected = np.zeros((4, 4))
    for i in range(4):
        nb = micro_graph.out_neighbors[i]
        e = np.array([v @ np.concatenate([W @ x[i], W @ x[j]]) for j in nb])
        e = np.where(e > 0, e, 0.2 * e)
        w = np.exp(e - e.max())
        expected[i, list(nb)] = w / w.sum()
    assert_allclose(a, expected, atol=1e-12)


def test_heads_are_averaged(micro_graph):
    rng = np.random.default_rng(4)
    heads = [AttentionHeadParams.init(rng, 2, 3, f"h{c}") for c in range(3)]
    x = rng.normal(size=(4, 2))
    combined = multi_head_attention(x, micro_graph.out_neighbors, heads).data
    singles = [attention_head(x, micro_graph.out_neighbors, h).data for h in heads]
    assert_allclose(combined, np.mean(singles, axis=0), atol=1e-12)


def test_batch_axis_matches_per_signal(micro_graph):
    rng = np.random.default_rng(5)
    p = MultiHeadParams.init(rng, 2, 2, 2, "att")
    xs = rng.normal(size=(3, 4, 2))
    batched = directional_attention(xs, micro_graph, p)
    for b in range(3):
        single = directional_attention(xs[b], micro_graph, p)
        assert_allclose(batched.a_out.data[b], single.a_out.data, atol=1e-12)
        assert_allclose(batched.a_in.data[b], single.a_in.data, atol=1e-12)


def test_gradient_through_attention(micro_graph):
    rng = np.random.default_rng(6)
    p = MultiHeadParams.init(rng, 2, 2, 2, "att")
    x = rng.normal(size=(4, 2))
    r_out, r_in = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))

    def f():
        att = directional_attention(x, micro_graph, p)
        return total(att.a_out * r_out) + total(att.a_in * r_in)

    assert finite_difference_check(f, p.parameters()) < 1e-4


def test_stop_gradient_detaches(micro_graph):
    p = MultiHeadParams.init(np.random.default_rng(7), 2, 2, 1, "att")
    with ComputationTape():
        live = directional_attention(np.ones((4, 2)), micro_graph, p)
        att = directional_attention(np.ones((4, 2)), micro_graph, p, stop_gradient=True)
    assert live.a_out.requires_grad
    assert not att.a_out.requires_grad and not att.a_in.requires_grad
    assert_allclose(att.a_out.data, live.a_out.data)


def test_misconfigured_heads(micro_graph):
    with pytest.raises(ConfigurationError):
        MultiHeadParams.init(np.random.default_rng(8), 2, 2, 0, "att")
    with pytest.raises(ConfigurationError):
        multi_head_attention(np.ones((4, 2)), micro_graph.out_neighbors, [])
    head = AttentionHeadParams.init(np.random.default_rng(9), 3, 2, "h")
    with pytest.raises(DimensionError):
        attention_head(Tensor(np.ones((4, 2))), micro_graph.out_neighbors, head)


def _fixed_head(w, v, prefix):
    return AttentionHeadParams(W=Parameter(np.array(w, dtype=float), name=f"{prefix}.W"),
                               v=Parameter(np.array(v, dtype=float), name=f"{prefix}.v"))


class TestKnownValues:
    @pytest.fixture
    def path_graph(self):
        """a -> b -> c"""
        return build_graph([('a', 'b', 1.0), ('b', 'c', 1.0)], 10.0)

    def test_path_graph_weights(self, path_graph):
        p = MultiHeadParams(out_heads=[_fixed_head([[1.0]], [1.0, 1.0], "out")],
                            in_heads=[_fixed_head([[1.0]], [1.0, 1.0], "in")])
        att = directional_attention(np.array([[1.0], [2.0], [3.0]]), path_graph, p)
        e = np.exp
        assert_allclose(att.a_out.data[0], [e(2) / (e(2) + e(3)), e(3) / (e(2) + e(3)), 0.0], atol=1e-12)
        assert_allclose(att.a_out.data[1], [0.0, e(4) / (e(4) + e(5)), e(5) / (e(4) + e(5))], atol=1e-12)
        assert_allclose(att.a_out.data[2], [0.0, 0.0, 1.0])
        # in-direction of b looks back at a
        assert_allclose(att.a_in.data[1], [e(3) / (e(3) + e(4)), e(4) / (e(3) + e(4)), 0.0], atol=1e-12)
        assert_allclose(att.a_in.data[0], [1.0, 0.0, 0.0])

    def test_negative_scores_use_the_leaky_slope(self, path_graph):
        p = MultiHeadParams(out_heads=[_fixed_head([[1.0]], [-1.0, -1.0], "out")],
                            in_heads=[_fixed_head([[1.0]], [-1.0, -1.0], "in")])
        att = directional_attention(np.array([[1.0], [2.0], [3.0]]), path_graph, p)
        e = np.exp
        assert_allclose(att.a_out.data[0, :2], np.array([e(-0.4), e(-0.6)]) / (e(-0.4) + e(-0.6)), atol=1e-12)

    def test_zero_embedding_gives_uniform_rows(self):
        rng = np.random.default_rng(10)
        g = random_graph(rng, 7, density=0.4)
        p = MultiHeadParams.init(rng, 3, 2, 2, "att")
        for head in p.out_heads + p.in_heads:
            head.W.assign(np.zeros(head.W.shape))
        att = directional_attention(rng.normal(size=(7, 3)) * 5, g, p)
        for a, nb in ((att.a_out.data, g.out_neighbors), (att.a_in.data, g.in_neighbors)):
            mask = nb.support.mask
            assert_allclose(a, mask / mask.sum(axis=1, keepdims=True), atol=1e-12)

    def test_edgeless_graph_gives_identity(self):
        g = SensorGraph(adjacency=np.zeros((3, 3), dtype=np.int8), vertex_ids=('a', 'b', 'c'))
        rng = np.random.default_rng(11)
        att = directional_attention(rng.normal(size=(3, 2)), g, MultiHeadParams.init(rng, 2, 2, 2, "att"))
        assert_allclose(att.a_out.data, np.eye(3))
        assert_allclose(att.a_in.data, np.eye(3))


def test_vertex_permutation_equivariance():
    rng = np.random.default_rng(12)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        g = random_graph(rng, n, density=rng.uniform(0.1, 0.6))
        perm = rng.permutation(n)
        permuted = SensorGraph(adjacency=np.asarray(g.adjacency)[np.ix_(perm, perm)],
                               vertex_ids=tuple(g.vertex_ids[i] for i in perm))
        p = MultiHeadParams.init(rng, 2, 3, 2, "att")
        x = rng.normal(size=(n, 2))

        att = directional_attention(x, g, p)
        moved = directional_attention(x[perm], permuted, p)
        assert_allclose(moved.a_out.data, att.a_out.data[np.ix_(perm, perm)], atol=1e-12)
        assert_allclose(moved.a_in.data, att.a_in.data[np.ix_(perm, perm)], atol=1e-12)


class TestStaticAdjacency:
    def test_same_row_stochastic_matrices_at_every_timestamp(self):
        rng = np.random.default_rng(13)
        g = random_graph(rng, 8, density=0.3)
        first = step_attention(rng.normal(size=(8, 2)), g, None, t=0)
        later = step_attention(rng.normal(size=(8, 2)) * 50, g, None, t=9)
        assert later.t == 9
        for a, b, nb in ((first.a_out, later.a_out, g.out_neighbors), (first.a_in, later.a_in, g.in_neighbors)):
            assert_allclose(a.data, b.data)
            assert_allclose(a.data.sum(axis=1), np.ones(8), atol=1e-12)
            mask = nb.support.mask
            assert np.all(a.data[~mask] == 0.0)
            assert_allclose(a.data[mask], np.repeat(1.0 / mask.sum(axis=1), mask.sum(axis=1)))

    def test_matches_attention_with_zero_embedding(self, micro_graph):
        rng = np.random.default_rng(14)
        p = MultiHeadParams.init(rng, 2, 2, 1, "att")
        for head in p.out_heads + p.in_heads:
            head.W.assign(np.zeros(head.W.shape))
        learned = directional_attention(rng.normal(size=(4, 2)), micro_graph, p)
        fixed = static_attention(micro_graph)
        assert_allclose(fixed.a_out.data, learned.a_out.data, atol=1e-12)
        assert_allclose(fixed.a_in.data, learned.a_in.data, atol=1e-12)

    def test_carries_no_gradient(self, micro_graph):
        with ComputationTape():
            att = step_attention(np.ones((4, 2)), micro_graph, None)
        assert not att.a_out.requires_grad and not att.a_in.requires_grad
