"""Simulation harness: environments, batched experiments, metrics and benchmarks.

Feedback for impression ``t`` of repetition ``r`` is ``u_t < ctr(c_t)`` where
``u`` comes from a stream seeded by ``(master_seed, r)`` only, so every policy
in a comparison faces the same random numbers.
"""
from __future__ import annotations

import csv
import io
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from .dp import OpCounter, dp_argmax
from .graph import ElementGraph, GraphError, IngredientTree, build_element_graph
from .model import expected_rewards
from .policies import ClairvoyantPolicy, Policy, make_policy

DEFAULT_NAMES = ("template", "picture background", "picture size", "text font", "text color")
DEFAULT_PARENT = (None, 0, 1, 0, 3)
DEFAULT_COUNTS = (2, 5, 4, 5, 1)
SIZE_PRESETS = {200: DEFAULT_COUNTS}

FEEDBACK_STREAM = 2
POLICY_STREAM = 1


class LogFormatError(ValueError):
    pass


def element_counts_for_size(n_creatives: int, n_ingredients: int = 5) -> tuple:
    """Element counts whose product is ``n_creatives``, spread as evenly as primes allow."""
    if n_creatives < 1:
        raise ValueError("n_creatives must be positive")
    if n_ingredients == 5 and n_creatives in SIZE_PRESETS:
        return SIZE_PRESETS[n_creatives]
    primes, m, p = [], n_creatives, 2
    while p * p <= m:
        while m % p == 0:
            primes.append(p)
            m //= p
        p += 1
    if m > 1:
        primes.append(m)
    counts = [1] * n_ingredients
    for q in sorted(primes, reverse=True):
        k = int(np.argmin(counts))
        counts[k] *= q
    return tuple(counts)


def default_tree(counts=DEFAULT_COUNTS) -> IngredientTree:
    """Five-ingredient tree: template -> (picture background -> picture size, text font -> text color)."""
    return IngredientTree.from_counts(counts, DEFAULT_PARENT, DEFAULT_NAMES)


def default_graph(counts=DEFAULT_COUNTS, constraints=()) -> ElementGraph:
    return build_element_graph(default_tree(counts), constraints=constraints)


# -- environments --------------------------------------------------------------------------

class Environment:
    """Click probabilities over the feasible creatives of a graph.

    ``ctr[k]`` belongs to ``graph.creatives[k]``; creatives with
    ``available[k] == False`` (and infeasible ones) pay nothing.
    """

    def __init__(self, graph: ElementGraph, ctr, available=None):
        self.graph = graph
        self.ctr = np.asarray(ctr, dtype=float)
        if self.ctr.shape != (graph.n_creatives,):
            raise ValueError("ctr must have one entry per feasible creative")
        self.available = (np.ones(len(self.ctr), dtype=bool) if available is None
                          else np.asarray(available, dtype=bool))
        if not self.available.any():
            raise ValueError("environment has no available creative")
        if ((self.ctr < 0) | (self.ctr > 1)).any():
            raise ValueError("ctr values must lie in [0, 1]")
        masked = np.where(self.available, self.ctr, -np.inf)
        self.best_index = int(np.argmax(masked))
        self.best_ctr = float(self.ctr[self.best_index])

    @property
    def best_creative(self) -> tuple:
        return tuple(int(v) for v in self.graph.creatives[self.best_index])

    def lookup(self, choices):
        """``(ctr values, valid)`` for an ``(S, N)`` array; invalid picks have ctr 0."""
        idx = self.graph.creative_index(choices)
        valid = idx >= 0
        valid[valid] = self.available[idx[valid]]
        values = np.where(valid, self.ctr[np.maximum(idx, 0)], 0.0)
        return values, valid

    def ctr_of(self, creative) -> float:
        values, valid = self.lookup([creative])
        if not valid[0]:
            raise KeyError(f"creative {tuple(creative)} is not in this environment")
        return float(values[0])


class SyntheticEnv(Environment):
    def __init__(self, graph, true_weights, raw_scores, ctr, p_lo, p_hi, degenerate=False):
        super().__init__(graph, ctr)
        self.true_weights = np.asarray(true_weights, dtype=float)
        self.raw_scores = np.asarray(raw_scores, dtype=float)
        self.p_lo, self.p_hi = p_lo, p_hi
        self.degenerate = degenerate


class ReplayEnv(Environment):
    def __init__(self, graph, impressions, clicks):
        impressions = np.asarray(impressions, dtype=np.int64)
        clicks = np.asarray(clicks, dtype=np.int64)
        available = impressions > 0
        ctr = np.zeros(len(impressions))
        ctr[available] = clicks[available] / impressions[available]
        super().__init__(graph, ctr, available)
        self.impressions, self.clicks = impressions, clicks


def gen_synthetic(graph_structure: ElementGraph, seed=0, p_lo: float = 0.01,
                  p_hi: float = 0.30) -> SyntheticEnv:
    """Draw vertex and edge weights i.i.d. N(0, 1) and min-max rescale scores to [p_lo, p_hi]."""
    if not 0.0 < p_lo <= p_hi < 1.0:
        raise ValueError("need 0 < p_lo <= p_hi < 1")
    rng = np.random.default_rng(seed)
    ix = graph_structure.indexer
    w = rng.standard_normal(ix.dimension)
    w[0] = 0.0
    graph = graph_structure.with_weight_vector(w)
    raw = expected_rewards(w, ix, graph.creatives)
    lo, hi = raw.min(), raw.max()
    degenerate = not hi > lo
    if degenerate:
        ctr = np.full(len(raw), 0.5 * (p_lo + p_hi))
    else:
        ctr = p_lo + (raw - lo) / (hi - lo) * (p_hi - p_lo)
        ctr = np.clip(ctr, p_lo, p_hi)
    return SyntheticEnv(graph, w, raw, ctr, p_lo, p_hi, degenerate)


def env_from_ctr(graph: ElementGraph, ctr_by_creative: dict) -> Environment:
    """Environment from an explicit ``{creative tuple: ctr}`` map covering every feasible creative."""
    ctr = np.array([ctr_by_creative[tuple(int(v) for v in c)] for c in graph.creatives])
    return Environment(graph, ctr)


def bernoulli_feedback(env: Environment, creative, rng) -> int:
    return int(rng.random() < env.ctr_of(creative))


# -- experiments ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    policy: str = "aes"
    policy_params: dict = field(default_factory=dict)
    batch_size: int = 1000
    n_batches: int = 2000
    n_reps: int = 20
    master_seed: int = 0
    env: dict = field(default_factory=lambda: {"type": "synthetic"})
    record_timing: bool = True
    record_selections: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if self.n_batches < 0:
            raise ValueError("n_batches must be >= 0")


METRICS_HEADER = ("policy", "rep", "batch", "impressions", "clicks", "overall_ctr", "cum_regret",
                  "sel_time_ns", "infeasible_count")


@dataclass
class MetricsRecord:
    """Per-(rep, batch) traces; all arrays are ``(n_reps, n_batches)``.

    ``impressions``, ``clicks``, ``cum_regret`` and ``infeasible`` are
    cumulative; ``sel_time_ns``/``upd_time_ns`` are per batch.
    """
    policy: str
    impressions: np.ndarray
    clicks: np.ndarray
    cum_regret: np.ndarray
    sel_time_ns: np.ndarray
    infeasible: np.ndarray
    upd_time_ns: np.ndarray = None
    ops: np.ndarray = None
    selections: list = None

    @property
    def n_reps(self) -> int:
        return self.impressions.shape[0]

    @property
    def n_batches(self) -> int:
        return self.impressions.shape[1]

    @property
    def overall_ctr(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.impressions > 0, self.clicks / np.maximum(self.impressions, 1), 0.0)

    def mean_ctr(self) -> np.ndarray:
        return self.overall_ctr.mean(axis=0)

    def std_ctr(self) -> np.ndarray:
        return self.overall_ctr.std(axis=0)

    def mean_regret(self) -> np.ndarray:
        return self.cum_regret.mean(axis=0)

    def std_regret(self) -> np.ndarray:
        return self.cum_regret.std(axis=0)

    def final_ctr(self) -> np.ndarray:
        return self.overall_ctr[:, -1]

    def final_regret(self) -> np.ndarray:
        return self.cum_regret[:, -1]

    def total_time_ns(self) -> np.ndarray:
        upd = self.upd_time_ns if self.upd_time_ns is not None else 0
        return (self.sel_time_ns + upd).sum(axis=1)

    def summary(self) -> dict:
        if self.n_batches == 0:
            return {"policy": self.policy, "final_ctr_mean": 0.0, "final_ctr_std": 0.0,
                    "final_regret_mean": 0.0, "final_regret_std": 0.0}
        return {"policy": self.policy,
                "final_ctr_mean": float(self.final_ctr().mean()),
                "final_ctr_std": float(self.final_ctr().std()),
                "final_regret_mean": float(self.final_regret().mean()),
                "final_regret_std": float(self.final_regret().std())}

    def write_csv(self, target) -> None:
        """Write the metrics CSV to a path or text stream (floats in round-trip repr)."""
        if isinstance(target, (str, Path)):
            with open(target, "w", encoding="utf-8", newline="") as fh:
                self.write_csv(fh)
            return
        w = csv.writer(target, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        ctr = self.overall_ctr
        for r in range(self.n_reps):
            for b in range(self.n_batches):
                w.writerow([self.policy, r, b + 1, int(self.impressions[r, b]),
                            int(self.clicks[r, b]), repr(float(ctr[r, b])),
                            repr(float(self.cum_regret[r, b])), int(self.sel_time_ns[r, b]),
                            int(self.infeasible[r, b])])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def read_metrics_csv(source) -> MetricsRecord:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8", newline="") as fh:
            return read_metrics_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if tuple(header or ()) != METRICS_HEADER:
        raise LogFormatError(f"unexpected metrics header {header!r}")
    rows = list(reader)
    policy = rows[0][0] if rows else ""
    n_reps = max((int(r[1]) for r in rows), default=-1) + 1
    n_batches = max((int(r[2]) for r in rows), default=0)
    shape = (max(n_reps, 1), n_batches)
    imp, clk = np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64)
    reg, sel = np.zeros(shape), np.zeros(shape, dtype=np.int64)
    inf = np.zeros(shape, dtype=np.int64)
    for row in rows:
        r, b = int(row[1]), int(row[2]) - 1
        imp[r, b], clk[r, b] = int(row[3]), int(row[4])
        reg[r, b], sel[r, b], inf[r, b] = float(row[6]), int(row[7]), int(row[8])
    return MetricsRecord(policy, imp, clk, reg, sel, inf)


def compute_regret(chosen_ctr, best_ctr: float) -> np.ndarray:
    """Cumulative expected regret per batch from the chosen creatives' true CTRs.

    ``chosen_ctr`` is ``(n_batches, batch_size)``.
    """
    chosen_ctr = np.asarray(chosen_ctr, dtype=float)
    if chosen_ctr.size == 0:
        return np.zeros(len(chosen_ctr))
    return np.cumsum((best_ctr - chosen_ctr).sum(axis=1))


def _run_rep(config: ExperimentConfig, env, policy_factory, rep: int) -> dict:
    if callable(env) and not isinstance(env, Environment):
        env = env(rep)
    policy = policy_factory(env.graph)
    if policy.graph.signature() != env.graph.signature():
        raise GraphError("policy and environment use different element graphs")
    policy.reset()
    prng = np.random.default_rng([config.master_seed, rep, POLICY_STREAM])
    frng = np.random.default_rng([config.master_seed, rep, FEEDBACK_STREAM])
    B, bs = config.n_batches, config.batch_size
    clicks = np.zeros(B, dtype=np.int64)
    infeasible = np.zeros(B, dtype=np.int64)
    regret_inc = np.zeros(B)
    sel_ns = np.zeros(B, dtype=np.int64)
    upd_ns = np.zeros(B, dtype=np.int64)
    selections = [] if config.record_selections else None
    for b in range(B):
        t0 = time.perf_counter_ns()
        choices = policy.select_batch(bs, prng)
        t1 = time.perf_counter_ns()
        values, valid = env.lookup(choices)
        rewards = (frng.random(bs) < values).astype(np.int64)
        t2 = time.perf_counter_ns()
        policy.observe_batch(choices, rewards)
        t3 = time.perf_counter_ns()
        if config.record_timing:
            sel_ns[b], upd_ns[b] = t1 - t0, t3 - t2
        clicks[b] = rewards.sum()
        infeasible[b] = (~valid).sum()
        regret_inc[b] = (env.best_ctr - values).sum()
        if selections is not None:
            selections.append(choices @ env.graph.radix)
    return {
        "clicks": np.cumsum(clicks),
        "infeasible": np.cumsum(infeasible),
        "cum_regret": np.cumsum(regret_inc),
        "sel": sel_ns, "upd": upd_ns,
        "ops": policy.ops.count,
        "selections": np.concatenate(selections) if selections else
        (np.zeros(0, dtype=np.int64) if selections is not None else None),
    }


def run_experiment(config: ExperimentConfig, env, policy_factory: Callable | None = None,
                   jobs: int | None = 1) -> MetricsRecord:
    """Run ``config.n_reps`` independent repetitions and stack their traces.

    ``env`` is an :class:`Environment` shared by all reps, or a callable
    ``rep -> Environment``.  ``policy_factory(graph)`` builds a fresh policy;
    by default it comes from ``config.policy``/``config.policy_params``.
    ``jobs > 1`` runs repetitions in worker processes (factory must pickle).
    """
    if policy_factory is None:
        policy_factory = partial(_factory, config.policy, dict(config.policy_params))
    reps = range(config.n_reps)
    if jobs and jobs > 1 and config.n_reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(partial(_run_rep, config, env, policy_factory), reps))
    else:
        results = [_run_rep(config, env, policy_factory, r) for r in reps]
    B = config.n_batches
    impressions = np.tile(np.arange(1, B + 1, dtype=np.int64) * config.batch_size,
                          (config.n_reps, 1))
    stack = lambda key, dtype=None: np.array([r[key] for r in results], dtype=dtype).reshape(
        config.n_reps, B)
    return MetricsRecord(
        policy=config.policy if isinstance(config.policy, str) else str(config.policy),
        impressions=impressions,
        clicks=stack("clicks", np.int64),
        cum_regret=stack("cum_regret", float),
        sel_time_ns=stack("sel", np.int64),
        infeasible=stack("infeasible", np.int64),
        upd_time_ns=stack("upd", np.int64),
        ops=np.array([r["ops"] for r in results], dtype=np.int64),
        selections=[r["selections"] for r in results] if config.record_selections else None,
    )


def _factory(name, params, graph):
    return make_policy(name, graph, **params)


def clairvoyant_factory(env: Environment):
    return partial(_clairvoyant, env.best_creative)


def _clairvoyant(creative, graph):
    return ClairvoyantPolicy(graph, creative)


def ctr_lift(metrics: MetricsRecord, baseline: MetricsRecord) -> np.ndarray:
    """Relative overall-CTR gain of ``metrics`` over ``baseline`` per batch (rep means)."""
    base = baseline.mean_ctr()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(base > 0, metrics.mean_ctr() / base - 1.0, 0.0)


def compare(config: ExperimentConfig, env, policies, params: dict | None = None,
            jobs: int | None = 1) -> dict:
    """Run several policies on one environment with common feedback streams."""
    params = params or {}
    out = {}
    for name in policies:
        cfg = replace(config, policy=name, policy_params=dict(params.get(name, {})))
        out[name] = run_experiment(cfg, env, jobs=jobs)
    return out


# -- search-space sweep --------------------------------------------------------------------

def sweep_search_space(sizes, config: ExperimentConfig, policies, params: dict | None = None,
                       parent=DEFAULT_PARENT, env_seed=0, p_lo: float = 0.01,
                       p_hi: float = 0.30, jobs: int | None = 1):
    """Final cumulative regret per (policy, creative count).

    Each size keeps the tree and rescales element counts so their product is
    the requested number of creatives.  Returns ``(rows, records)`` where
    ``records[(policy, size)]`` is the full :class:`MetricsRecord`.
    """
    rows, records = [], {}
    for size in sizes:
        counts = element_counts_for_size(size, len(parent))
        names = DEFAULT_NAMES if len(parent) == len(DEFAULT_NAMES) else None
        tree = IngredientTree.from_counts(counts, parent, names)
        env = gen_synthetic(build_element_graph(tree), seed=env_seed, p_lo=p_lo, p_hi=p_hi)
        for name, rec in compare(config, env, policies, params, jobs).items():
            records[(name, size)] = rec
            final = rec.final_regret() if rec.n_batches else np.zeros(rec.n_reps)
            rows.append({"policy": name, "n_creatives": env.graph.n_creatives,
                         "regret_mean": float(final.mean()), "regret_std": float(final.std())})
    return rows, records


# -- replay logs ---------------------------------------------------------------------------

def parse_creative_id(text: str, graph: ElementGraph) -> int:
    """Index into ``graph.creatives`` for ``c_<k>`` (k-th feasible creative) or ``i-j-k...``."""
    text = text.strip()
    if text.startswith("c_"):
        k = int(text[2:])
        if not 0 <= k < graph.n_creatives:
            raise ValueError(f"creative {text} out of range")
        return k
    parts = [int(p) for p in text.split("-")]
    idx = int(graph.creative_index([parts])[0])
    if idx < 0:
        raise ValueError(f"creative {text} violates a visual constraint")
    return idx


def aggregate_logs(log_file, graph: ElementGraph) -> ReplayEnv:
    """Per-creative CTR from a pre-aggregated or raw impression log CSV."""
    path = Path(log_file)
    impressions = np.zeros(graph.n_creatives, dtype=np.int64)
    clicks = np.zeros(graph.n_creatives, dtype=np.int64)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise LogFormatError(f"replay log not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header == ["creative_id", "impressions", "clicks"]:
            raw = False
        elif header == ["creative_id", "clicked"]:
            raw = True
        else:
            raise LogFormatError(f"{path}:1: unrecognised header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                k = parse_creative_id(row[0], graph)
                if raw:
                    clicked = int(row[1])
                    if clicked not in (0, 1):
                        raise ValueError("clicked must be 0 or 1")
                    n, s = 1, clicked
                else:
                    n, s = int(row[1]), int(row[2])
                    if n < 0 or not 0 <= s <= n:
                        raise ValueError("need 0 <= clicks <= impressions")
            except (ValueError, GraphError) as exc:
                raise LogFormatError(f"{path}:{lineno}: {exc}") from None
            impressions[k] += n
            clicks[k] += s
    if impressions.sum() == 0:
        raise LogFormatError(f"{path}: zero total impressions")
    missing = int((impressions == 0).sum())
    if missing:
        warnings.warn(f"{missing} creatives have no impressions and are excluded", stacklevel=2)
    return ReplayEnv(graph, impressions, clicks)


def generate_replay_log(graph: ElementGraph, path, seed=0, mean_ctr: float = 0.05,
                        impressions: int = 850_000, raw: bool = False) -> np.ndarray:
    """Write a fabricated log whose per-creative CTRs follow a tree-linear model.

    CTRs come from :func:`gen_synthetic` and are scaled to average ``mean_ctr``;
    impressions are spread uniformly at random.  Returns the true CTRs.
    """
    rng = np.random.default_rng([seed, 7])
    env = gen_synthetic(graph, seed=seed)
    ctr = np.clip(env.ctr * (mean_ctr / env.ctr.mean()), 0.0, 1.0)
    n = rng.multinomial(impressions, np.full(graph.n_creatives, 1.0 / graph.n_creatives))
    s = rng.binomial(n, ctr)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if raw:
            w.writerow(["creative_id", "clicked"])
            for k in range(graph.n_creatives):
                flags = np.zeros(n[k], dtype=np.int64)
                flags[:s[k]] = 1
                rng.shuffle(flags)
                w.writerows([f"c_{k}", int(f)] for f in flags)
        else:
            w.writerow(["creative_id", "impressions", "clicks"])
            w.writerows([f"c_{k}", int(n[k]), int(s[k])] for k in range(graph.n_creatives))
    return ctr


# -- timing ----------------------------------------------------------------------------------

def timing_benchmark(policies, env: Environment, impressions: int = 50_000, reps: int = 10,
                     batch_size: int = 1000, seed: int = 0, params: dict | None = None) -> dict:
    """Wall-clock of selection (+ update) per policy over ``impressions`` impressions.

    Returns ``{policy: {mean_time, std_time, mean_sel_time, std_sel_time,
    ops_per_selection}}`` with times in seconds per repetition.
    """
    batch_size = min(batch_size, impressions)
    config = ExperimentConfig(batch_size=batch_size, n_batches=math.ceil(impressions / batch_size),
                              n_reps=reps, master_seed=seed, record_timing=True)
    out = {}
    for name, rec in compare(config, env, policies, params).items():
        total = rec.total_time_ns() / 1e9
        sel = rec.sel_time_ns.sum(axis=1) / 1e9
        n_sel = rec.n_batches * batch_size
        out[name] = {"mean_time": float(total.mean()), "std_time": float(total.std()),
                     "mean_sel_time": float(sel.mean()), "std_sel_time": float(sel.std()),
                     "ops_per_selection": float(rec.ops.mean() / max(n_sel, 1))}
    return out


def dp_ops_per_selection(graph: ElementGraph) -> int:
    """Instrumented DP step count for a single argmax on ``graph``."""
    counter = OpCounter()
    dp_argmax(graph, np.zeros(graph.indexer.dimension), counter)
    return counter.count


def random_graph(rng, max_ingredients: int = 6, max_elements: int = 4,
                 max_forbid: float = 0.4) -> ElementGraph:
    """Random feasible element graph with N(0, 1) weights and random visual constraints.

    Parents always have smaller ids than their children.
    """
    while True:
        n = int(rng.integers(1, max_ingredients + 1))
        counts = rng.integers(1, max_elements + 1, size=n)
        parent = [None] + [int(rng.integers(0, i)) for i in range(1, n)]
        tree = IngredientTree.from_counts(counts, parent)
        p_forbid = rng.uniform(0.0, max_forbid)
        constraints = []
        for (p, c) in tree.edges:
            forbid = rng.random((counts[p], counts[c])) < p_forbid
            if forbid.all():
                forbid[rng.integers(counts[p]), rng.integers(counts[c])] = False
            constraints += [((p, int(a)), (c, int(b))) for a, b in zip(*np.nonzero(forbid))]
        graph = build_element_graph(tree, constraints=constraints)
        if graph.n_creatives == 0:
            continue
        return graph.with_weight_vector(rng.standard_normal(graph.indexer.dimension))
