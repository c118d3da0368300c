"""Ingredient trees, element graphs and the creative feature space.

An ad creative picks one element from every ingredient.  Ingredients form a
rooted tree; pairwise interactions (and visual constraints) only exist between
elements of tree-adjacent ingredients.  Element identity is the pair
``(ingredient id, local index)``; names are labels only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

Creative = tuple  # tuple[int, ...] of length N, one local element index per ingredient


class GraphError(ValueError):
    """Invalid ingredient tree, element graph or graph file."""


class InfeasibleError(GraphError):
    """No feasible creative exists, or a creative violates a constraint."""


@dataclass(frozen=True)
class Ingredient:
    id: int
    name: str
    element_count: int
    element_names: tuple = ()

    def __post_init__(self):
        if self.element_count < 1:
            raise GraphError(f"ingredient {self.name!r} needs at least one element")
        if self.element_names and len(self.element_names) != self.element_count:
            raise GraphError(f"ingredient {self.name!r}: element name count mismatch")

    def element_name(self, j: int) -> str:
        return self.element_names[j] if self.element_names else f"{self.name}[{j}]"


class IngredientTree:
    """Rooted tree over ingredients ``0..N-1``.

    ``parent[i]`` is the parent id of ingredient ``i`` (``None`` for the root).
    """

    def __init__(self, ingredients: Sequence[Ingredient], parent: Sequence[int | None]):
        self.ingredients = tuple(ingredients)
        n = len(self.ingredients)
        if n == 0:
            raise GraphError("tree needs at least one ingredient")
        if [ing.id for ing in self.ingredients] != list(range(n)):
            raise GraphError("ingredient ids must be contiguous 0..N-1 in order")
        if len(parent) != n:
            raise GraphError("parent map must cover every ingredient")
        self.parent = tuple(None if p is None else int(p) for p in parent)
        roots = [i for i, p in enumerate(self.parent) if p is None]
        if len(roots) != 1:
            raise GraphError(f"tree must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        for i, p in enumerate(self.parent):
            if p is not None and not 0 <= p < n:
                raise GraphError(f"ingredient {i} has unknown parent {p}")
            if p == i:
                raise GraphError(f"ingredient {i} is its own parent")
        children = [[] for _ in range(n)]
        for i, p in enumerate(self.parent):
            if p is not None:
                children[p].append(i)
        self.children = tuple(tuple(c) for c in children)
        # reachability from the root rules out cycles
        seen = {self.root}
        stack = [self.root]
        while stack:
            for c in self.children[stack.pop()]:
                if c in seen:
                    raise GraphError("parent relation contains a cycle")
                seen.add(c)
                stack.append(c)
        if len(seen) != n:
            raise GraphError("not every ingredient is reachable from the root")

    @classmethod
    def from_counts(cls, counts: Sequence[int], parent: Sequence[int | None],
                    names: Sequence[str] | None = None) -> "IngredientTree":
        names = names or [f"I{i}" for i in range(len(counts))]
        ings = [Ingredient(i, names[i], int(c)) for i, c in enumerate(counts)]
        return cls(ings, parent)

    @property
    def n(self) -> int:
        return len(self.ingredients)

    @property
    def counts(self) -> tuple:
        return tuple(ing.element_count for ing in self.ingredients)

    @property
    def edges(self) -> tuple:
        """Tree edges ``(parent, child)`` ordered by child id."""
        return tuple((p, i) for i, p in enumerate(self.parent) if p is not None)

    @property
    def leaves(self) -> tuple:
        return tuple(i for i in range(self.n) if not self.children[i])

    def postorder(self) -> list:
        """Children before parents; siblings visited in id order."""
        order, stack = [], [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for c in reversed(self.children[node]):
                stack.append((c, False))
        return order

    def adjacent(self, a: int, b: int) -> bool:
        return self.parent[a] == b or self.parent[b] == a

    def index_of(self, name: str) -> int:
        for ing in self.ingredients:
            if ing.name == name:
                return ing.id
        raise GraphError(f"unknown ingredient {name!r}")

    def __eq__(self, other):
        return (isinstance(other, IngredientTree) and self.parent == other.parent
                and self.counts == other.counts)

    def __hash__(self):
        return hash((self.parent, self.counts))

    def __repr__(self):
        return f"IngredientTree(counts={self.counts}, parent={self.parent})"


class ElementGraph:
    """Weighted element graph over an ingredient tree.

    ``edge_weights[(p, c)]`` and ``edge_present[(p, c)]`` are ``L_p x L_c``
    matrices for each tree edge.  Absent edges encode visual constraints.
    Treat instances as immutable; arrays are flagged read-only.
    """

    def __init__(self, tree: IngredientTree, vertex_weights, edge_weights, edge_present, bias=0.0):
        self.tree = tree
        self.bias = float(bias)
        self.vertex_weights = tuple(_frozen(np.asarray(w, dtype=float)) for w in vertex_weights)
        self.edge_weights = {e: _frozen(np.asarray(edge_weights[e], dtype=float)) for e in tree.edges}
        self.edge_present = {e: _frozen(np.asarray(edge_present[e], dtype=bool)) for e in tree.edges}
        for i, w in enumerate(self.vertex_weights):
            if w.shape != (tree.counts[i],):
                raise GraphError(f"vertex weights for ingredient {i} have shape {w.shape}")
        for (p, c) in tree.edges:
            shape = (tree.counts[p], tree.counts[c])
            if self.edge_weights[(p, c)].shape != shape or self.edge_present[(p, c)].shape != shape:
                raise GraphError(f"edge block ({p}, {c}) must have shape {shape}")
            if not self.edge_present[(p, c)].any():
                raise InfeasibleError(
                    f"no feasible creative: ingredients {p} and {c} have no allowed element pair")

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def counts(self) -> tuple:
        return self.tree.counts

    @property
    def n_vertices(self) -> int:
        return sum(self.counts)

    @property
    def n_edges(self) -> int:
        return int(sum(m.sum() for m in self.edge_present.values()))

    @cached_property
    def indexer(self) -> "FeatureIndexer":
        return FeatureIndexer(self)

    def weight_vector(self) -> np.ndarray:
        """Pack bias, vertex and present-edge weights in indexer order."""
        ix = self.indexer
        w = np.zeros(ix.dimension)
        w[0] = self.bias
        for i, vw in enumerate(self.vertex_weights):
            w[ix.vertex_index[i]] = vw
        for e, coords in zip(self.tree.edges, ix.edge_index):
            mask = coords >= 0
            w[coords[mask]] = self.edge_weights[e][mask]
        return w

    def with_weight_vector(self, w) -> "ElementGraph":
        """Copy of this graph carrying the weights packed in ``w``."""
        ix = self.indexer
        w = np.asarray(w, dtype=float)
        if w.shape != (ix.dimension,):
            raise GraphError(f"weight vector must have length {ix.dimension}")
        vws = [w[ix.vertex_index[i]] for i in range(self.n)]
        ews = {}
        for e, coords in zip(self.tree.edges, ix.edge_index):
            ews[e] = np.where(coords >= 0, w[np.maximum(coords, 0)], 0.0)
        return ElementGraph(self.tree, vws, ews, self.edge_present, bias=w[0])

    def signature(self) -> tuple:
        """Structural identity (tree, element counts, constraint mask)."""
        return (self.tree.parent, self.counts,
                tuple(self.edge_present[e].tobytes() for e in self.tree.edges))

    # -- creative space ------------------------------------------------------------------

    @cached_property
    def radix(self) -> np.ndarray:
        """Mixed-radix place values so that ``choices @ radix`` is the lexicographic rank."""
        counts = np.asarray(self.counts, dtype=np.int64)
        return _frozen(np.concatenate([np.cumprod(counts[::-1])[::-1][1:], [1]]).astype(np.int64))

    @property
    def n_choice_arrays(self) -> int:
        return int(np.prod(self.counts, dtype=np.int64))

    def feasible_mask(self, choices) -> np.ndarray:
        """Vectorised feasibility check of an ``(S, N)`` array of choice arrays."""
        choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
        ok = np.ones(len(choices), dtype=bool)
        for (p, c) in self.tree.edges:
            ok &= self.edge_present[(p, c)][choices[:, p], choices[:, c]]
        return ok

    @cached_property
    def creatives(self) -> np.ndarray:
        """All feasible choice arrays, ``(n_creatives, N)``, lexicographic order."""
        total = self.n_choice_arrays
        if total > 50_000_000:
            raise GraphError(f"{total} choice arrays is too many to enumerate")
        grid = np.stack(np.unravel_index(np.arange(total), self.counts), axis=1).astype(np.int64)
        return _frozen(grid[self.feasible_mask(grid)])

    @property
    def n_creatives(self) -> int:
        return len(self.creatives)

    @cached_property
    def _rank_to_index(self) -> np.ndarray:
        table = np.full(self.n_choice_arrays, -1, dtype=np.int64)
        table[self.creatives @ self.radix] = np.arange(self.n_creatives)
        return _frozen(table)

    def creative_index(self, choices) -> np.ndarray:
        """Position of each choice array in :attr:`creatives`, ``-1`` if infeasible."""
        choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
        self.check_range(choices)
        return self._rank_to_index[choices @ self.radix]

    def check_range(self, choices) -> None:
        choices = np.atleast_2d(np.asarray(choices))
        if choices.shape[1] != self.n:
            raise GraphError(f"creative must have length {self.n}, got {choices.shape[1]}")
        if (choices < 0).any() or (choices >= np.asarray(self.counts)).any():
            raise GraphError("element index out of range")

    def __repr__(self):
        return (f"ElementGraph(counts={self.counts}, |V|={self.n_vertices}, "
                f"|E|={self.n_edges})")


class FeatureIndexer:
    """Maps creatives to 0/1 feature vectors over bias, vertices and present edges.

    Coordinate 0 is the bias, then vertices by ingredient, then present edges
    per tree edge in row-major order.  Flags drop whole weight classes, which
    gives the restricted spaces used by edge-only and vertex-only models.
    """

    def __init__(self, graph: ElementGraph, bias: bool = True, vertices: bool = True,
                 edges: bool = True):
        self.graph = graph
        self.bias, self.vertices, self.edges = bias, vertices, edges
        k = 0
        self.vertex_index = []
        full_coords = []
        if bias:
            full_coords.append(0)
            k = 1
        base = 1
        for i, L in enumerate(graph.counts):
            if vertices:
                self.vertex_index.append(np.arange(k, k + L))
                full_coords.extend(range(base, base + L))
                k += L
            else:
                self.vertex_index.append(None)
            base += L
        self.edge_index = []
        for e in graph.tree.edges:
            present = graph.edge_present[e]
            m = int(present.sum())
            if edges:
                coords = np.full(present.shape, -1, dtype=np.int64)
                coords[present] = np.arange(k, k + m)
                self.edge_index.append(coords)
                full_coords.extend(range(base, base + m))
                k += m
            else:
                self.edge_index.append(None)
            base += m
        self.dimension = k
        self.full_coords = np.asarray(full_coords, dtype=np.int64)

    @property
    def nnz(self) -> int:
        """Nonzeros per feasible creative."""
        n = self.graph.n
        return int(self.bias) + (n if self.vertices else 0) + (n - 1 if self.edges else 0)

    def indices(self, choices) -> np.ndarray:
        """Active coordinates, ``(S, nnz)``, for an array of feasible choice arrays."""
        choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
        cols = []
        if self.bias:
            cols.append(np.zeros(len(choices), dtype=np.int64))
        if self.vertices:
            for i in range(self.graph.n):
                cols.append(self.vertex_index[i][choices[:, i]])
        if self.edges:
            for (p, c), coords in zip(self.graph.tree.edges, self.edge_index):
                col = coords[choices[:, p], choices[:, c]]
                if (col < 0).any():
                    raise InfeasibleError("creative uses a forbidden element pair")
                cols.append(col)
        if not cols:
            return np.zeros((len(choices), 0), dtype=np.int64)
        return np.stack(cols, axis=1)

    def featurize_batch(self, choices) -> np.ndarray:
        idx = self.indices(choices)
        X = np.zeros((len(idx), self.dimension))
        np.put_along_axis(X, idx, 1.0, axis=1)
        return X

    def to_full(self, w) -> np.ndarray:
        """Embed restricted weights (``(K,)`` or ``(S, K)``) into the full layout, zeros elsewhere."""
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape[:-1] + (self.graph.indexer.dimension,))
        out[..., self.full_coords] = w
        return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def build_element_graph(tree: IngredientTree, vertex_weights=None, edge_weights=None,
                        constraints: Iterable = (), bias: float = 0.0) -> ElementGraph:
    """Build an element graph; ``constraints`` lists forbidden pairs ``((i, a), (j, b))``.

    Missing weights default to zero.  Forbidden pairs must join tree-adjacent
    ingredients, and every tree edge must keep at least one allowed pair.
    """
    counts = tree.counts
    if vertex_weights is None:
        vertex_weights = [np.zeros(L) for L in counts]
    if len(vertex_weights) != tree.n:
        raise GraphError("vertex weights must be given for every ingredient")
    edge_weights = dict(edge_weights or {})
    ew = {}
    for (p, c) in tree.edges:
        if (p, c) in edge_weights:
            ew[(p, c)] = np.asarray(edge_weights[(p, c)], dtype=float)
        elif (c, p) in edge_weights:
            ew[(p, c)] = np.asarray(edge_weights[(c, p)], dtype=float).T
        else:
            ew[(p, c)] = np.zeros((counts[p], counts[c]))
    present = {e: np.ones((counts[e[0]], counts[e[1]]), dtype=bool) for e in tree.edges}
    for pair in constraints:
        (i, a), (j, b) = pair
        i, a, j, b = int(i), int(a), int(j), int(b)
        if not (0 <= i < tree.n and 0 <= j < tree.n):
            raise GraphError(f"constraint {pair} names an unknown ingredient")
        if not tree.adjacent(i, j):
            raise GraphError(f"constraint {pair} joins ingredients that are not tree-adjacent")
        if tree.parent[j] == i:
            p, c, ep, ec = i, j, a, b
        else:
            p, c, ep, ec = j, i, b, a
        if not (0 <= ep < counts[p] and 0 <= ec < counts[c]):
            raise GraphError(f"constraint {pair} has an element index out of range")
        present[(p, c)][ep, ec] = False
    return ElementGraph(tree, vertex_weights, ew, present, bias=bias)


def is_feasible(graph: ElementGraph, creative: Sequence[int]) -> bool:
    graph.check_range(creative)
    return bool(graph.feasible_mask(creative)[0])


def enumerate_creatives(graph: ElementGraph) -> Iterator[Creative]:
    """Yield every feasible creative once, in lexicographic order."""
    for row in graph.creatives:
        yield tuple(int(v) for v in row)


def featurize(indexer: FeatureIndexer, creative: Sequence[int]) -> np.ndarray:
    """Dense 0/1 feature vector of one feasible creative."""
    indexer.graph.check_range(creative)
    return indexer.featurize_batch([creative])[0]


# -- graph files ---------------------------------------------------------------------------

def graph_from_dict(doc: dict) -> ElementGraph:
    try:
        ing_docs = doc["ingredients"]
        tree_edges = doc.get("tree_edges", [])
    except (KeyError, TypeError) as exc:
        raise GraphError(f"graph document is missing key {exc}") from None
    if not isinstance(ing_docs, list) or not ing_docs:
        raise GraphError("'ingredients' must be a non-empty list")
    ingredients = []
    for i, d in enumerate(ing_docs):
        elements = d.get("elements")
        if not isinstance(elements, list) or not elements:
            raise GraphError(f"ingredient {d.get('name', i)!r} needs a non-empty 'elements' list")
        ingredients.append(Ingredient(i, str(d["name"]), len(elements), tuple(map(str, elements))))
    names = [ing.name for ing in ingredients]
    if len(set(names)) != len(names):
        raise GraphError("ingredient names must be unique")
    pos = {n: i for i, n in enumerate(names)}
    parent: list = [None] * len(ingredients)
    for edge in tree_edges:
        if len(edge) != 2 or edge[0] not in pos or edge[1] not in pos:
            raise GraphError(f"bad tree edge {edge!r}")
        p, c = pos[edge[0]], pos[edge[1]]
        if parent[c] is not None:
            raise GraphError(f"ingredient {edge[1]!r} has two parents")
        parent[c] = p
    tree = IngredientTree(ingredients, parent)
    if "root" in doc and doc["root"] != names[tree.root]:
        raise GraphError(f"declared root {doc['root']!r} is not the tree root {names[tree.root]!r}")

    def element(ref):
        if not isinstance(ref, (list, tuple)) or len(ref) != 2:
            raise GraphError(f"bad element reference {ref!r}")
        ing_name, el = ref
        if ing_name not in pos:
            raise GraphError(f"unknown ingredient {ing_name!r}")
        ing = ingredients[pos[ing_name]]
        if isinstance(el, int):
            j = el
        elif el in ing.element_names:
            j = ing.element_names.index(el)
        else:
            raise GraphError(f"unknown element {el!r} of ingredient {ing_name!r}")
        return ing.id, j

    constraints = [(element(c["a"]), element(c["b"])) for c in doc.get("constraints", [])]
    vw, ew, bias = None, None, 0.0
    weights = doc.get("weights")
    if weights:
        bias = float(weights.get("bias", 0.0))
        vw = [np.asarray(weights["vertices"][n], dtype=float) for n in names]
        ew = {}
        for e in weights.get("edges", []):
            ew[(pos[e["parent"]], pos[e["child"]])] = np.asarray(e["values"], dtype=float)
    return build_element_graph(tree, vw, ew, constraints, bias=bias)


def graph_to_dict(graph: ElementGraph, weights: bool = True) -> dict:
    tree = graph.tree
    names = [ing.name for ing in tree.ingredients]
    doc = {
        "root": names[tree.root],
        "ingredients": [{"name": ing.name,
                         "elements": [ing.element_name(j) for j in range(ing.element_count)]}
                        for ing in tree.ingredients],
        "tree_edges": [[names[p], names[c]] for p, c in tree.edges],
        "constraints": [],
    }
    for (p, c) in tree.edges:
        for a, b in zip(*np.nonzero(~graph.edge_present[(p, c)])):
            doc["constraints"].append({"a": [names[p], int(a)], "b": [names[c], int(b)]})
    if weights:
        doc["weights"] = {
            "bias": graph.bias,
            "vertices": {n: graph.vertex_weights[i].tolist() for i, n in enumerate(names)},
            "edges": [{"parent": names[p], "child": names[c],
                       "values": graph.edge_weights[(p, c)].tolist()} for p, c in tree.edges],
        }
    return doc


def load_graph(path) -> ElementGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise GraphError(f"graph file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: invalid JSON ({exc})") from None
    return graph_from_dict(doc)


def save_graph(graph: ElementGraph, path, weights: bool = True) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph, weights), indent=2) + "\n",
                          encoding="utf-8")
