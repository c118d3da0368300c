import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aes_bandit.dp import OpCounter, brute_force_argmax, dp_argmax, dp_argmax_batch, dp_max_value
from aes_bandit.graph import IngredientTree, InfeasibleError, build_element_graph, is_feasible
from aes_bandit.sim import random_graph

from conftest import eq2_score, oracle_argmax, weighted_graph


def test_single_ingredient():
    g = build_element_graph(IngredientTree.from_counts([3], [None]), [[0.1, 0.3, 0.2]])
    assert dp_max_value(g, g.weight_vector()) == pytest.approx(0.3)
    assert dp_argmax(g, g.weight_vector()) == ((1,), pytest.approx(0.3))


def test_chain(chain2):
    assert dp_max_value(chain2, chain2.weight_vector()) == pytest.approx(0.65)


def test_tie_goes_to_lowest_index():
    tree = IngredientTree.from_counts([3, 2], [None, 0])
    g = build_element_graph(tree, [[0.0, 0.5, 0.5], [0.2, 0.2]])
    assert dp_argmax(g, g.weight_vector())[0] == (1, 0)


def test_one_creative():
    g = build_element_graph(IngredientTree.from_counts([1, 1, 1], [None, 0, 0]), [[0.4], [0.1], [0.2]])
    assert dp_argmax(g, g.weight_vector())[0] == (0, 0, 0)
    assert brute_force_argmax(g, g.weight_vector())[0] == (0, 0, 0)


def test_forbidden_edge_is_skipped():
    tree = IngredientTree.from_counts([2, 2], [None, 0])
    g = build_element_graph(tree, [[1.0, 0.0], [1.0, 0.0]], constraints=[((0, 0), (1, 0))])
    choice, value = dp_argmax(g, g.weight_vector())
    assert is_feasible(g, choice)
    assert value == pytest.approx(1.0)


def test_four_by_three_with_forbidden_edges():
    rng = np.random.default_rng(4)
    tree = IngredientTree.from_counts([3, 3, 3, 3], [None, 0, 0, 2])
    cons = []
    for (p, c) in tree.edges:
        mask = rng.random((3, 3)) < 0.1
        cons += [((p, int(a)), (c, int(b))) for a, b in zip(*np.nonzero(mask))]
    g = build_element_graph(tree, constraints=cons)
    g = g.with_weight_vector(rng.standard_normal(g.indexer.dimension))
    best = max(eq2_score(g, c) for c in map(tuple, g.creatives))
    assert dp_max_value(g, g.weight_vector()) == pytest.approx(best, abs=1e-12)


def test_hundred_random_graphs_match_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        g = random_graph(rng, max_ingredients=5, max_elements=3)
        want_c, want_v = oracle_argmax(g)
        got_c, got_v = dp_argmax(g, g.weight_vector())
        assert got_c == want_c
        assert abs(got_v - want_v) <= 1e-12
        bf_c, bf_v = brute_force_argmax(g, g.weight_vector())
        assert bf_c == want_c and abs(bf_v - want_v) <= 1e-12


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_argmax_feasible_and_self_consistent(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, max_ingredients=6, max_elements=4, max_forbid=0.7)
    choice, value = dp_argmax(g, g.weight_vector())
    assert is_feasible(g, choice)
    assert eq2_score(g, choice) == pytest.approx(value, abs=1e-12)
    assert value == dp_max_value(g, g.weight_vector())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5.0))
def test_shifting_one_ingredient(seed, delta):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    w = g.weight_vector()
    i = int(rng.integers(g.tree.n))
    shifted = w.copy()
    shifted[g.indexer.vertex_index[i]] += delta
    c0, v0 = dp_argmax(g, w)
    c1, v1 = dp_argmax(g, shifted)
    assert c1 == c0
    assert v1 == pytest.approx(v0 + delta, abs=1e-12)


def test_batch_rows_are_independent(graph333, rng):
    W = rng.standard_normal((20, graph333.indexer.dimension))
    choices, values = dp_argmax_batch(graph333, W)
    for row, c, v in zip(W, choices, values):
        assert dp_argmax(graph333, row) == (tuple(int(x) for x in c), v)


def test_dimension_mismatch(graph333):
    with pytest.raises(ValueError):
        dp_argmax(graph333, np.zeros(3))


def test_non_finite_weights_are_rejected(graph333):
    w = graph333.weight_vector().copy()
    w[graph333.indexer.vertex_index[0]] = -np.inf
    with pytest.raises(InfeasibleError):
        dp_argmax(graph333, w)


class TestCounters:
    def test_dp_count_is_graph_linear(self):
        for counts in ([2, 3], [4, 4, 4], [2, 5, 4, 5, 1]):
            g = weighted_graph(counts, [None] + list(range(len(counts) - 1)), np.random.default_rng(0))
            c = OpCounter()
            dp_argmax(g, g.weight_vector(), c)
            assert c.count <= 3 * (g.n_vertices + g.n_edges)

    def test_doubling_elements(self):
        parent = [None, 0, 1, 0]
        ops, n_creatives = [], []
        for counts in ([2, 2, 3, 2], [4, 4, 6, 4]):
            g = weighted_graph(counts, parent, np.random.default_rng(1))
            c = OpCounter()
            dp_argmax(g, g.weight_vector(), c)
            ops.append(c.count)
            n_creatives.append(g.n_creatives)
        assert ops[1] <= 4 * ops[0]
        assert n_creatives[1] == 2 ** 4 * n_creatives[0]

    def test_enumeration_overtakes_dp(self):
        dp_ops, bf_ops = [], []
        for L in (1, 2, 3, 4, 5):
            g = weighted_graph([L] * 5, [None, 0, 1, 2, 3], np.random.default_rng(L))
            a, b = OpCounter(), OpCounter()
            dp_argmax(g, g.weight_vector(), a)
            brute_force_argmax(g, g.weight_vector(), b)
            dp_ops.append(a.count)
            bf_ops.append(b.count)
        assert bf_ops[0] < dp_ops[0]
        assert bf_ops[-1] > dp_ops[-1]
