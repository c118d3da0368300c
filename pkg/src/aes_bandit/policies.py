"""Creative-selection policies: the tree Thompson sampler and its baselines.

Every policy selects whole batches from a frozen state (``select_batch``) and
learns from the batch afterwards (``observe_batch``), which is how delayed
feedback is simulated.  ``select``/``observe`` are the single-impression
forms of the same interface.

Ties are broken towards the lowest index everywhere.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from .dp import OpCounter, dp_argmax_batch
from .graph import ElementGraph, FeatureIndexer
from .model import PosteriorState


class PerCreativeStats:
    """Impression/click counts per feasible creative (indices into ``graph.creatives``)."""

    def __init__(self, graph: ElementGraph):
        self.graph = graph
        self.n = np.zeros(graph.n_creatives, dtype=np.int64)
        self.s = np.zeros(graph.n_creatives, dtype=np.int64)

    @property
    def creatives(self) -> np.ndarray:
        return self.graph.creatives

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def means(self, unvisited: float = 1.0) -> np.ndarray:
        out = np.full(len(self.n), float(unvisited))
        seen = self.n > 0
        out[seen] = self.s[seen] / self.n[seen]
        return out

    def add(self, idx, rewards) -> None:
        np.add.at(self.n, idx, 1)
        np.add.at(self.s, idx, np.asarray(rewards, dtype=np.int64))


def _as_output(choices: np.ndarray, size):
    if size is None:
        return tuple(int(v) for v in choices[0])
    return choices


def uniform_feasible(graph: ElementGraph, rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform feasible choice arrays by per-ingredient draws with rejection."""
    out = np.empty((size, graph.n), dtype=np.int64)
    filled = 0
    counts = np.asarray(graph.counts)
    for _ in range(1000):
        if filled == size:
            return out
        draw = rng.integers(0, counts, size=(size - filled, graph.n))
        keep = draw[graph.feasible_mask(draw)]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    # acceptance rate is tiny; the enumeration gives the same distribution
    out[filled:] = graph.creatives[rng.integers(graph.n_creatives, size=size - filled)]
    return out


# -- selection rules -------------------------------------------------------------------------

def aes_select(posterior: PosteriorState, graph: ElementGraph, rng, size=None,
               counter: OpCounter | None = None):
    """Thompson step: sample weights from the posterior, take the DP argmax."""
    W = posterior.sample_many(1 if size is None else size, rng)
    choices, _ = dp_argmax_batch(graph, W, counter)
    return _as_output(choices, size)


def restricted_ts_select(posterior: PosteriorState, indexer: FeatureIndexer, rng, size=None,
                         counter: OpCounter | None = None):
    """Thompson step over a restricted feature space; excluded weight classes are zero."""
    W = indexer.to_full(posterior.sample_many(1 if size is None else size, rng))
    choices, _ = dp_argmax_batch(indexer.graph, W, counter)
    return _as_output(choices, size)


def edgets_select(posterior, graph: ElementGraph, rng, size=None, counter=None):
    return restricted_ts_select(posterior, FeatureIndexer(graph, vertices=False), rng, size, counter)


def vertexts_select(posterior, graph: ElementGraph, rng, size=None, counter=None):
    return restricted_ts_select(posterior, FeatureIndexer(graph, edges=False), rng, size, counter)


def egreedy_select(stats: PerCreativeStats, rng, epsilon: float, size=None):
    """Uniform creative w.p. epsilon, else best empirical mean (unvisited count as 1.0)."""
    S = 1 if size is None else size
    greedy = int(np.argmax(stats.means(1.0)))
    explore = rng.random(S) < epsilon
    rand = rng.integers(len(stats.n), size=S)
    return _as_output(stats.creatives[np.where(explore, rand, greedy)], size)


def ucb_select(stats: PerCreativeStats, t, lam: float, size=None):
    """UCB1 index ``mean + lam * sqrt(2 ln t / n)``; unvisited creatives first.

    ``t`` is the impression number of the first selection; later rows in the
    batch use ``t + 1, t + 2, ...`` with the counts held fixed.
    """
    S = 1 if size is None else size
    unvisited = np.flatnonzero(stats.n == 0)
    if len(unvisited):
        idx = np.full(S, unvisited[0])
    else:
        ts = float(t) + np.arange(S)
        mean = stats.s / stats.n
        if lam == 0:
            idx = np.full(S, np.argmax(mean))
        else:
            bonus = lam * np.sqrt(2.0 * np.log(ts)[:, None] / stats.n[None, :])
            idx = np.argmax(mean[None, :] + bonus, axis=1)
    return _as_output(stats.creatives[idx], size)


def linucb_scores(state: PosteriorState, indexer: FeatureIndexer, alpha: float) -> np.ndarray:
    """``x^T theta + alpha sqrt(x^T A^-1 x)`` for every feasible creative."""
    idx = indexer.indices(indexer.graph.creatives)
    mean = state.w_mean[idx].sum(axis=1)
    if alpha == 0:
        return mean
    quad = state.B_inv[idx[:, :, None], idx[:, None, :]].sum(axis=(1, 2))
    return mean + alpha * np.sqrt(np.maximum(quad, 0.0))


def linucb_select(state: PosteriorState, indexer: FeatureIndexer, alpha: float, rng=None,
                  size=None):
    k = int(np.argmax(linucb_scores(state, indexer, alpha)))
    S = 1 if size is None else size
    return _as_output(np.repeat(indexer.graph.creatives[k][None, :], S, axis=0), size)


def ind_egreedy_select(elem_means, graph: ElementGraph, rng, epsilon: float, size=None,
                       max_resample: int = 10):
    """Independent epsilon-greedy per ingredient.

    ``elem_means[i]`` holds the element mean rewards of ingredient ``i``.
    Infeasible compositions have their random components redrawn up to
    ``max_resample`` times, then fall back to the first feasible creative.
    """
    S = 1 if size is None else size
    counts = np.asarray(graph.counts)
    greedy = np.array([int(np.argmax(m)) for m in elem_means])
    explore = rng.random((S, graph.n)) < epsilon
    choices = np.where(explore, rng.integers(0, counts, size=(S, graph.n)), greedy)
    bad = ~graph.feasible_mask(choices)
    for _ in range(max_resample):
        if not bad.any():
            break
        rows = np.flatnonzero(bad)
        redraw = rng.integers(0, counts, size=(len(rows), graph.n))
        choices[rows] = np.where(explore[rows], redraw, greedy)
        bad[rows] = ~graph.feasible_mask(choices[rows])
    if bad.any():
        choices[bad] = graph.creatives[0]
    return _as_output(choices, size)


def tegreedy_select(posterior: PosteriorState, graph: ElementGraph, rng, epsilon: float,
                    size=None, counter: OpCounter | None = None):
    """Greedy DP on the posterior mean, uniform feasible creative w.p. epsilon."""
    S = 1 if size is None else size
    greedy, _ = dp_argmax_batch(graph, posterior.w_mean[None, :], counter)
    explore = rng.random(S) < epsilon
    choices = np.repeat(greedy, S, axis=0)
    n_explore = int(explore.sum())
    if n_explore:
        choices[explore] = uniform_feasible(graph, rng, n_explore)
    return _as_output(choices, size)


def fullts_select(stats: PerCreativeStats, rng, size=None, counter: OpCounter | None = None):
    """Beta-Bernoulli Thompson sampling over the enumerated creatives."""
    S = 1 if size is None else size
    a = 1.0 + stats.s
    b = 1.0 + stats.n - stats.s
    n_c = len(a)
    idx = np.empty(S, dtype=np.int64)
    chunk = max(1, 2_000_000 // n_c)
    for lo in range(0, S, chunk):
        hi = min(S, lo + chunk)
        idx[lo:hi] = np.argmax(rng.beta(a, b, size=(hi - lo, n_c)), axis=1)
    if counter is not None:
        counter.add(S * n_c)
    return _as_output(stats.creatives[idx], size)


# -- MVT: all-pairs model with hill climbing -------------------------------------------------

class MvtIndexer:
    """Features of the all-pairs model: bias, every element, every cross-ingredient pair."""

    def __init__(self, counts):
        self.counts = tuple(int(c) for c in counts)
        n = len(self.counts)
        self.vertex_offset = np.concatenate([[1], 1 + np.cumsum(self.counts)[:-1]]).astype(np.int64)
        k = 1 + sum(self.counts)
        self.pairs = list(combinations(range(n), 2))
        self.pair_offset = {}
        for j, l in self.pairs:
            self.pair_offset[(j, l)] = k
            k += self.counts[j] * self.counts[l]
        self.dimension = k
        # pair coordinate of (element e of i, element c of j) is base + e*stride_e + c*stride_c
        self.base = np.zeros((n, n), dtype=np.int64)
        self.stride_e = np.zeros((n, n), dtype=np.int64)
        self.stride_c = np.zeros((n, n), dtype=np.int64)
        for (j, l), off in self.pair_offset.items():
            self.base[j, l] = self.base[l, j] = off
            self.stride_e[j, l], self.stride_c[j, l] = self.counts[l], 1
            self.stride_e[l, j], self.stride_c[l, j] = 1, self.counts[l]

    def indices(self, choices) -> np.ndarray:
        choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
        cols = [np.zeros(len(choices), dtype=np.int64)]
        cols += [self.vertex_offset[i] + choices[:, i] for i in range(len(self.counts))]
        cols += [self.pair_offset[(j, l)] + choices[:, j] * self.counts[l] + choices[:, l]
                 for j, l in self.pairs]
        return np.stack(cols, axis=1)

    def featurize_batch(self, choices) -> np.ndarray:
        idx = self.indices(choices)
        X = np.zeros((len(idx), self.dimension))
        np.put_along_axis(X, idx, 1.0, axis=1)
        return X

    def candidate_scores(self, theta, ing, current) -> np.ndarray:
        """Score ``(R, L_max)`` of every element of ingredient ``ing[r]`` given the other choices.

        Padding slots beyond ``L_i`` are ``-inf``.
        """
        R, n = current.shape
        L_max = max(self.counts)
        counts = np.asarray(self.counts)
        e = np.arange(L_max)
        valid = e[None, :] < counts[ing][:, None]
        e_safe = np.where(valid, e[None, :], 0)
        rows = np.arange(R)[:, None]
        scores = theta[rows, self.vertex_offset[ing][:, None] + e_safe]
        for j in range(n):
            other = ing != j
            coords = (self.base[ing, j][:, None] + e_safe * self.stride_e[ing, j][:, None]
                      + (current[:, j] * self.stride_c[ing, j])[:, None])
            scores += np.where(other[:, None], theta[rows, coords], 0.0)
        return np.where(valid, scores, -np.inf)


def hill_climb(mvt: MvtIndexer, theta, rng, sweeps: int = 4, restarts: int = 3,
               counter: OpCounter | None = None) -> np.ndarray:
    """Coordinate ascent for each row of ``theta``; constraints are ignored."""
    theta = np.atleast_2d(theta)
    S, n = len(theta), len(mvt.counts)
    counts = np.asarray(mvt.counts)
    rows = np.arange(S)
    best = np.zeros((S, n), dtype=np.int64)
    best_score = np.full(S, -np.inf)
    ops = 0
    for _ in range(restarts):
        cur = rng.integers(0, counts, size=(S, n))
        for _ in range(sweeps):
            order = rng.permuted(np.tile(np.arange(n), (S, 1)), axis=1)
            for pos in range(n):
                ing = order[:, pos]
                if counts[ing].max() == 1:
                    continue  # single-element ingredients have nothing to climb
                cur[rows, ing] = np.argmax(mvt.candidate_scores(theta, ing, cur), axis=1)
                ops += int(counts[ing].sum()) * n
        score = np.take_along_axis(theta, mvt.indices(cur), axis=1).sum(axis=1)
        better = score > best_score
        best[better] = cur[better]
        best_score[better] = score[better]
    if counter is not None:
        counter.add(ops)
    return best


def mvt_select(posterior: PosteriorState, mvt: MvtIndexer, rng, sweeps: int = 4,
               restarts: int = 3, size=None, counter: OpCounter | None = None):
    theta = posterior.sample_many(1 if size is None else size, rng)
    return _as_output(hill_climb(mvt, theta, rng, sweeps, restarts, counter), size)


# -- policy objects --------------------------------------------------------------------------

class Policy:
    name = "policy"

    def __init__(self, graph: ElementGraph):
        self.graph = graph
        self.ops = OpCounter()
        self.reset()

    def reset(self) -> None:
        self.ops = OpCounter()

    def select_batch(self, n: int, rng) -> np.ndarray:
        raise NotImplementedError

    def observe_batch(self, choices, rewards) -> None:
        pass

    def select(self, rng):
        return tuple(int(v) for v in self.select_batch(1, rng)[0])

    def observe(self, creative, reward) -> None:
        self.observe_batch(np.asarray([creative], dtype=np.int64), np.asarray([reward]))

    def __repr__(self):
        return f"{type(self).__name__}({self.graph!r})"


class RandomPolicy(Policy):
    name = "random"

    def select_batch(self, n, rng):
        return self.graph.creatives[rng.integers(self.graph.n_creatives, size=n)]


class _StatsPolicy(Policy):
    def reset(self):
        super().reset()
        self.stats = PerCreativeStats(self.graph)

    def observe_batch(self, choices, rewards):
        self.stats.add(self.graph.creative_index(choices), rewards)


class EgreedyPolicy(_StatsPolicy):
    name = "egreedy"

    def __init__(self, graph, epsilon: float = 0.1):
        self.epsilon = epsilon
        super().__init__(graph)

    def select_batch(self, n, rng):
        return egreedy_select(self.stats, rng, self.epsilon, size=n)


class UCBPolicy(_StatsPolicy):
    name = "ucb"

    def __init__(self, graph, lam: float = 0.03):
        self.lam = lam
        super().__init__(graph)

    def select_batch(self, n, rng):
        return ucb_select(self.stats, self.stats.total + 1, self.lam, size=n)


class FullTSPolicy(_StatsPolicy):
    name = "full_ts"

    def select_batch(self, n, rng):
        return fullts_select(self.stats, rng, size=n, counter=self.ops)


class IndEgreedyPolicy(Policy):
    name = "ind_egreedy"

    def __init__(self, graph, epsilon: float = 0.1, max_resample: int = 10):
        self.epsilon = epsilon
        self.max_resample = max_resample
        super().__init__(graph)

    def reset(self):
        super().reset()
        self.elem_n = [np.zeros(L, dtype=np.int64) for L in self.graph.counts]
        self.elem_s = [np.zeros(L, dtype=np.int64) for L in self.graph.counts]

    def element_means(self):
        out = []
        for n, s in zip(self.elem_n, self.elem_s):
            m = np.ones(len(n))
            m[n > 0] = s[n > 0] / n[n > 0]
            out.append(m)
        return out

    def select_batch(self, n, rng):
        return ind_egreedy_select(self.element_means(), self.graph, rng, self.epsilon, size=n,
                                  max_resample=self.max_resample)

    def observe_batch(self, choices, rewards):
        choices = np.atleast_2d(choices)
        rewards = np.asarray(rewards, dtype=np.int64)
        for i in range(self.graph.n):
            np.add.at(self.elem_n[i], choices[:, i], 1)
            np.add.at(self.elem_s[i], choices[:, i], rewards)


class _LinearPolicy(Policy):
    """Shared Gaussian-posterior machinery over a feature indexer."""

    def __init__(self, graph, sigma: float = 0.5, recompute_interval: int = 1000,
                 indexer: FeatureIndexer | None = None):
        self.sigma = sigma
        self.recompute_interval = recompute_interval
        self.indexer = indexer or graph.indexer
        super().__init__(graph)

    def reset(self):
        super().reset()
        self.posterior = PosteriorState(self.indexer.dimension, self.sigma, self.recompute_interval)

    def observe_batch(self, choices, rewards):
        self.posterior.update_batch(self.indexer.featurize_batch(choices), rewards)


class AESPolicy(_LinearPolicy):
    name = "aes"

    def select_batch(self, n, rng):
        return aes_select(self.posterior, self.graph, rng, size=n, counter=self.ops)


class EdgeTSPolicy(_LinearPolicy):
    name = "edge_ts"

    def __init__(self, graph, sigma: float = 0.5, recompute_interval: int = 1000):
        super().__init__(graph, sigma, recompute_interval, FeatureIndexer(graph, vertices=False))

    def select_batch(self, n, rng):
        return restricted_ts_select(self.posterior, self.indexer, rng, size=n, counter=self.ops)


class VertexTSPolicy(_LinearPolicy):
    name = "vertex_ts"

    def __init__(self, graph, sigma: float = 0.5, recompute_interval: int = 1000):
        super().__init__(graph, sigma, recompute_interval, FeatureIndexer(graph, edges=False))

    def select_batch(self, n, rng):
        return restricted_ts_select(self.posterior, self.indexer, rng, size=n, counter=self.ops)


class TEgreedyPolicy(_LinearPolicy):
    name = "tegreedy"

    def __init__(self, graph, epsilon: float = 0.1, recompute_interval: int = 1000):
        self.epsilon = epsilon
        super().__init__(graph, 1.0, recompute_interval)

    def select_batch(self, n, rng):
        return tegreedy_select(self.posterior, self.graph, rng, self.epsilon, size=n,
                               counter=self.ops)


class GreedyDPPolicy(_LinearPolicy):
    """Pure exploitation: DP argmax on the posterior mean."""
    name = "greedy"

    def select_batch(self, n, rng):
        choices, _ = dp_argmax_batch(self.graph, self.posterior.w_mean[None, :], self.ops)
        return np.repeat(choices, n, axis=0)


class LinUCBPolicy(_LinearPolicy):
    name = "linucb"

    def __init__(self, graph, alpha: float = 0.3, recompute_interval: int = 1000):
        self.alpha = alpha
        super().__init__(graph, 1.0, recompute_interval)

    def select_batch(self, n, rng):
        self.ops.add(self.graph.n_creatives)
        return linucb_select(self.posterior, self.indexer, self.alpha, rng, size=n)


class MVTPolicy(Policy):
    name = "mvt"

    def __init__(self, graph, sigma: float = 0.5, sweeps: int = 4, restarts: int = 3,
                 recompute_interval: int = 1000):
        self.sigma = sigma
        self.sweeps, self.restarts = sweeps, restarts
        self.recompute_interval = recompute_interval
        self.mvt = MvtIndexer(graph.counts)
        super().__init__(graph)

    def reset(self):
        super().reset()
        self.posterior = PosteriorState(self.mvt.dimension, self.sigma, self.recompute_interval)

    def select_batch(self, n, rng):
        return mvt_select(self.posterior, self.mvt, rng, self.sweeps, self.restarts, size=n,
                          counter=self.ops)

    def observe_batch(self, choices, rewards):
        self.posterior.update_batch(self.mvt.featurize_batch(choices), rewards)


class ClairvoyantPolicy(Policy):
    """Always shows a given creative (the true best one in regret checks)."""
    name = "clairvoyant"

    def __init__(self, graph, creative):
        self.creative = np.asarray(creative, dtype=np.int64)
        super().__init__(graph)

    def select_batch(self, n, rng):
        return np.repeat(self.creative[None, :], n, axis=0)


POLICIES = {
    cls.name: cls for cls in (
        RandomPolicy, EgreedyPolicy, UCBPolicy, LinUCBPolicy, IndEgreedyPolicy, TEgreedyPolicy,
        AESPolicy, MVTPolicy, FullTSPolicy, EdgeTSPolicy, VertexTSPolicy)
}

_PARAM_ALIASES = {"lambda": "lam", "S": "sweeps", "K": "restarts"}


def make_policy(name: str, graph: ElementGraph, **params) -> Policy:
    """Instantiate a policy by its config name (``aes``, ``egreedy``, ...)."""
    try:
        cls = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None
    params = {_PARAM_ALIASES.get(k, k): v for k, v in params.items()}
    try:
        return cls(graph, **params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for policy {name!r}: {exc}") from None
