"""Exact argmax of the tree-structured score by dynamic programming.

``d[i][j]`` is the best score of the subtree hanging from element ``j`` of
ingredient ``i``::

    d[i][j] = w_j + sum over child ingredients m of max_t (v_{j,t} + d[m][t])

with absent (forbidden) edges skipped.  Everything is vectorised over a
leading batch axis so one call handles a whole batch of Thompson samples.
"""
from __future__ import annotations

import numpy as np

from .graph import ElementGraph, InfeasibleError


class OpCounter:
    """Counts elementary DP / enumeration steps (vertex visits, edge relaxations, scans)."""

    def __init__(self):
        self.count = 0

    def add(self, k: int) -> None:
        self.count += int(k)


def dp_argmax_batch(graph: ElementGraph, W, counter: OpCounter | None = None):
    """Best creative for each row of ``W`` (``(S, K)`` in the graph's full indexer layout).

    Returns ``(choices (S, N), values (S,))``.  Ties go to the lowest element
    index at every decision, which equals the lexicographically first optimum
    whenever parents have smaller ids than their children.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    ix = graph.indexer
    if W.shape[1] != ix.dimension:
        raise ValueError(f"weights have dimension {W.shape[1]}, expected {ix.dimension}")
    S = len(W)
    tree = graph.tree
    ops = 0
    d = [None] * tree.n
    back = {}
    edge_of = {e: coords for e, coords in zip(tree.edges, ix.edge_index)}
    for i in tree.postorder():
        di = W[:, ix.vertex_index[i]].copy()
        ops += len(ix.vertex_index[i])
        for m in tree.children[i]:
            coords = edge_of[(i, m)]
            present = coords >= 0
            block = np.full((S,) + coords.shape, -np.inf)
            block[:, present] = W[:, coords[present]]
            block += d[m][:, None, :]
            best_t = block.argmax(axis=2)
            di += np.take_along_axis(block, best_t[:, :, None], axis=2)[:, :, 0]
            back[(i, m)] = best_t
            ops += int(present.sum())
        d[i] = di
    root = tree.root
    best_root = d[root].argmax(axis=1)
    values = d[root][np.arange(S), best_root] + W[:, 0]
    ops += graph.counts[root]
    if not np.isfinite(values).all():
        raise InfeasibleError("no feasible creative exists in this element graph")
    choices = np.empty((S, tree.n), dtype=np.int64)
    choices[:, root] = best_root
    stack = [root]
    while stack:
        i = stack.pop()
        for m in tree.children[i]:
            choices[:, m] = back[(i, m)][np.arange(S), choices[:, i]]
            stack.append(m)
    ops += tree.n
    if counter is not None:
        counter.add(ops * S)
    return choices, values


def dp_argmax(graph: ElementGraph, weights, counter: OpCounter | None = None):
    """``(creative, value)`` maximising the score over feasible creatives."""
    choices, values = dp_argmax_batch(graph, np.asarray(weights)[None, :], counter)
    return tuple(int(v) for v in choices[0]), float(values[0])


def dp_max_value(graph: ElementGraph, weights, counter: OpCounter | None = None) -> float:
    return dp_argmax(graph, weights, counter)[1]


def brute_force_argmax(graph: ElementGraph, weights, counter: OpCounter | None = None):
    """Enumerate every feasible creative; lexicographically first maximum wins."""
    creatives = graph.creatives
    if len(creatives) == 0:
        raise InfeasibleError("no feasible creative exists in this element graph")
    weights = np.asarray(weights, dtype=float)
    scores = weights[graph.indexer.indices(creatives)].sum(axis=1)
    k = int(np.argmax(scores))
    if counter is not None:
        counter.add(len(creatives))
    return tuple(int(v) for v in creatives[k]), float(scores[k])
