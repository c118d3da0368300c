import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aes_bandit.graph import (
    FeatureIndexer, GraphError, InfeasibleError, Ingredient, IngredientTree, build_element_graph,
    enumerate_creatives, featurize, graph_from_dict, graph_to_dict, is_feasible, load_graph,
    save_graph,
)
from aes_bandit.model import expected_reward
from aes_bandit.sim import DEFAULT_COUNTS, default_graph

from conftest import all_choice_arrays, eq2_score, oracle_feasible, weighted_graph


@st.composite
def small_graphs(draw):
    n = draw(st.integers(1, 4))
    counts = [draw(st.integers(1, 3)) for _ in range(n)]
    parent = [None] + [draw(st.integers(0, i - 1)) for i in range(1, n)]
    tree = IngredientTree.from_counts(counts, parent)
    constraints = []
    for (p, c) in tree.edges:
        pairs = list(itertools.product(range(counts[p]), range(counts[c])))
        k = draw(st.integers(0, len(pairs) - 1))
        chosen = draw(st.permutations(pairs))[:k]
        constraints += [((p, a), (c, b)) for a, b in chosen]
    return build_element_graph(tree, constraints=constraints)


class TestTree:
    def test_rejects_two_roots(self):
        with pytest.raises(GraphError, match="exactly one root"):
            IngredientTree.from_counts([1, 1], [None, None])

    def test_rejects_cycle(self):
        with pytest.raises(GraphError):
            IngredientTree.from_counts([1, 1, 1], [None, 2, 1])

    def test_rejects_empty_ingredient(self):
        with pytest.raises(GraphError):
            Ingredient(0, "x", 0)

    def test_edge_count_and_postorder(self):
        tree = IngredientTree.from_counts([2, 5, 4, 5, 1], [None, 0, 1, 0, 3])
        assert len(tree.edges) == tree.n - 1
        order = tree.postorder()
        assert order[-1] == tree.root
        for p, c in tree.edges:
            assert order.index(c) < order.index(p)
        assert tree.leaves == (2, 4)


class TestBuild:
    def test_default_five_ingredient_graph(self):
        g = default_graph()
        assert [ing.name for ing in g.tree.ingredients] == [
            "template", "picture background", "picture size", "text font", "text color"]
        assert g.n_vertices == sum(DEFAULT_COUNTS) == 17
        assert g.n_edges == 2 * 5 + 5 * 4 + 2 * 5 + 5 * 1

    def test_single_ingredient(self):
        g = build_element_graph(IngredientTree.from_counts([3], [None]))
        assert g.n_edges == 0
        assert g.n_creatives == 3

    def test_all_pairs_forbidden(self):
        tree = IngredientTree.from_counts([2, 2], [None, 0])
        cons = [((0, a), (1, b)) for a in range(2) for b in range(2)]
        with pytest.raises(InfeasibleError, match="no feasible creative"):
            build_element_graph(tree, constraints=cons)

    def test_non_adjacent_constraint_rejected(self):
        tree = IngredientTree.from_counts([2, 2, 2], [None, 0, 1])
        with pytest.raises(GraphError, match="not tree-adjacent"):
            build_element_graph(tree, constraints=[((0, 0), (2, 0))])

    def test_intra_ingredient_constraint_rejected(self):
        tree = IngredientTree.from_counts([2, 2], [None, 0])
        with pytest.raises(GraphError):
            build_element_graph(tree, constraints=[((0, 0), (0, 1))])

    def test_constraint_orientation_is_normalised(self):
        tree = IngredientTree.from_counts([2, 3], [None, 0])
        g = build_element_graph(tree, constraints=[((1, 2), (0, 1))])
        assert not g.edge_present[(0, 1)][1, 2]
        assert g.edge_present[(0, 1)].sum() == 5

    def test_weights_are_read_only(self, graph333):
        with pytest.raises(ValueError):
            graph333.vertex_weights[0][0] = 1.0


class TestFeasibility:
    def test_light_on_light_is_infeasible(self):
        tree = IngredientTree([Ingredient(0, "background", 2, ("light", "dark")),
                               Ingredient(1, "text color", 2, ("light", "dark"))], [None, 0])
        g = build_element_graph(tree, constraints=[((0, 0), (1, 0))])
        assert not is_feasible(g, (0, 0))
        assert is_feasible(g, (0, 1))
        assert is_feasible(g, (1, 0))

    def test_single_ingredient_always_feasible(self):
        g = build_element_graph(IngredientTree.from_counts([4], [None]))
        assert all(is_feasible(g, (j,)) for j in range(4))

    def test_out_of_range(self, graph333):
        with pytest.raises(GraphError):
            is_feasible(graph333, (0, 3, 0))
        with pytest.raises(GraphError):
            is_feasible(graph333, (0, 0))


class TestEnumerate:
    def test_default_has_200(self):
        assert len(list(enumerate_creatives(default_graph()))) == 200

    def test_chain_2x3(self):
        g = build_element_graph(IngredientTree.from_counts([2, 3], [None, 0]))
        assert list(enumerate_creatives(g)) == [(a, b) for a in range(2) for b in range(3)]

    def test_chain_2x2_one_forbidden(self):
        g = build_element_graph(IngredientTree.from_counts([2, 2], [None, 0]),
                                constraints=[((0, 1), (1, 0))])
        assert list(enumerate_creatives(g)) == [(0, 0), (0, 1), (1, 1)]

    @settings(max_examples=60, deadline=None)
    @given(small_graphs())
    def test_enumeration_matches_exhaustive_filter(self, g):
        expected = [c for c in all_choice_arrays(g) if oracle_feasible(g, c)]
        got = list(enumerate_creatives(g))
        assert got == expected
        for c in all_choice_arrays(g):
            assert is_feasible(g, c) == (c in set(got))

    @settings(max_examples=40, deadline=None)
    @given(small_graphs())
    def test_unconstrained_count_is_product(self, g):
        free = build_element_graph(g.tree)
        assert free.n_creatives == int(np.prod(g.counts))

    @settings(max_examples=40, deadline=None)
    @given(small_graphs())
    def test_creative_index_roundtrip(self, g):
        idx = g.creative_index(g.creatives)
        assert (idx == np.arange(g.n_creatives)).all()


class TestFeatures:
    def test_dimension(self):
        g = default_graph()
        assert g.indexer.dimension == 1 + g.n_vertices + g.n_edges

    def test_nonzeros_default(self):
        x = featurize(default_graph().indexer, (1, 2, 3, 4, 0))
        assert x.sum() == 10 and set(np.unique(x)) == {0.0, 1.0}
        assert x[0] == 1.0

    def test_nonzeros_single(self):
        g = build_element_graph(IngredientTree.from_counts([3], [None]))
        assert featurize(g.indexer, (2,)).sum() == 2

    def test_infeasible_rejected(self):
        g = build_element_graph(IngredientTree.from_counts([2, 2], [None, 0]),
                                constraints=[((0, 0), (1, 0))])
        with pytest.raises(InfeasibleError):
            featurize(g.indexer, (0, 0))

    def test_dot_product_matches_direct_sum(self, graph333):
        w = graph333.weight_vector()
        for c in enumerate_creatives(graph333):
            x = featurize(graph333.indexer, c)
            assert x @ w == pytest.approx(eq2_score(graph333, c), abs=1e-12)
            assert expected_reward(w, graph333.indexer, c) == pytest.approx(x @ w, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(small_graphs())
    def test_featurize_injective(self, g):
        supports = {tuple(np.flatnonzero(featurize(g.indexer, c))) for c in enumerate_creatives(g)}
        assert len(supports) == g.n_creatives

    def test_coordinates_are_a_bijection(self, graph333):
        ix = graph333.indexer
        coords = [0] + [int(v) for arr in ix.vertex_index for v in arr]
        coords += [int(v) for arr in ix.edge_index for v in arr[arr >= 0]]
        assert sorted(coords) == list(range(ix.dimension))

    def test_restricted_spaces(self, graph333):
        edge_ix = FeatureIndexer(graph333, vertices=False)
        vert_ix = FeatureIndexer(graph333, edges=False)
        assert edge_ix.dimension == 1 + graph333.n_edges
        assert vert_ix.dimension == 1 + graph333.n_vertices
        w = np.arange(1.0, vert_ix.dimension + 1)
        full = vert_ix.to_full(w)
        c = (1, 2, 0)
        assert full[graph333.indexer.indices([c])[0]].sum() == w[vert_ix.indices([c])[0]].sum()

    def test_no_bias_flag(self, graph333):
        ix = FeatureIndexer(graph333, bias=False)
        assert ix.dimension == graph333.indexer.dimension - 1
        assert ix.nnz == 5


class TestWeightPacking:
    def test_roundtrip(self, rng):
        g = weighted_graph([2, 3, 2], [None, 0, 0], rng, constraints=[((0, 1), (1, 2))])
        w = g.weight_vector()
        assert np.array_equal(g.with_weight_vector(w).weight_vector(), w)


class TestGraphFile:
    def test_roundtrip(self, tmp_path, rng):
        g = weighted_graph([2, 3, 2], [None, 0, 1], rng, constraints=[((1, 2), (2, 0))])
        path = tmp_path / "g.json"
        save_graph(g, path)
        h = load_graph(path)
        assert h.signature() == g.signature()
        assert np.array_equal(h.weight_vector(), g.weight_vector())

    def test_named_constraints(self):
        doc = {
            "root": "background",
            "ingredients": [{"name": "background", "elements": ["light", "dark"]},
                            {"name": "text color", "elements": ["light", "dark"]}],
            "tree_edges": [["background", "text color"]],
            "constraints": [{"a": ["background", "light"], "b": ["text color", "light"]}],
        }
        g = graph_from_dict(doc)
        assert g.n_creatives == 3
        assert graph_to_dict(g, weights=False)["constraints"] == [
            {"a": ["background", 0], "b": ["text color", 0]}]

    def test_wrong_root(self):
        doc = {"root": "b", "ingredients": [{"name": "a", "elements": ["x"]},
                                            {"name": "b", "elements": ["y"]}],
               "tree_edges": [["a", "b"]]}
        with pytest.raises(GraphError, match="root"):
            graph_from_dict(doc)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(GraphError, match="nope.json"):
            load_graph(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{", encoding="utf-8")
        with pytest.raises(GraphError):
            load_graph(p)

    def test_keys_are_bit_exact(self):
        doc = graph_to_dict(default_graph())
        assert set(doc) == {"root", "ingredients", "tree_edges", "constraints", "weights"}
        json.dumps(doc)
