import itertools

import numpy as np
import pytest

from aes_bandit.graph import IngredientTree, build_element_graph
from aes_bandit.sim import default_graph


def eq2_score(graph, creative):
    """Bias + vertex weights + tree-edge weights, read straight off the graph."""
    total = graph.bias
    for i, j in enumerate(creative):
        total += graph.vertex_weights[i][j]
    for (p, c) in graph.tree.edges:
        total += graph.edge_weights[(p, c)][creative[p], creative[c]]
    return total


def all_choice_arrays(graph):
    return itertools.product(*[range(L) for L in graph.counts])


def oracle_feasible(graph, creative):
    return all(graph.edge_present[(p, c)][creative[p], creative[c]] for p, c in graph.tree.edges)


def oracle_argmax(graph):
    """Exhaustive search over every choice array (lexicographic first maximum)."""
    best, best_val = None, -np.inf
    for c in all_choice_arrays(graph):
        if oracle_feasible(graph, c):
            v = eq2_score(graph, c)
            if v > best_val:
                best, best_val = c, v
    return best, best_val


def weighted_graph(counts, parent, rng, constraints=()):
    tree = IngredientTree.from_counts(counts, parent)
    g = build_element_graph(tree, constraints=constraints)
    return g.with_weight_vector(rng.standard_normal(g.indexer.dimension))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def chain2():
    """Two ingredients with one element each: b=0.1, w=0.2, 0.3, v=0.05."""
    tree = IngredientTree.from_counts([1, 1], [None, 0])
    return build_element_graph(tree, [[0.2], [0.3]], {(0, 1): [[0.05]]}, bias=0.1)


@pytest.fixture
def graph333(rng):
    return weighted_graph([3, 3, 3], [None, 0, 1], rng)


@pytest.fixture(scope="session")
def default_structure():
    return default_graph()
