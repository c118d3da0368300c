"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dp import brute_force_argmax, dp_argmax
from .graph import (
    GraphError, IngredientTree, build_element_graph, graph_from_dict, graph_to_dict, load_graph,
)
from .policies import POLICIES
from .sim import (
    DEFAULT_PARENT, ExperimentConfig, LogFormatError, aggregate_logs, compare, ctr_lift,
    default_graph, default_tree, element_counts_for_size, gen_synthetic, generate_replay_log,
    random_graph, sweep_search_space, timing_benchmark,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
SPEED_CHECK_MIN_SIZE = 1200


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _master_seed(cli_seed, doc_seed=None) -> int:
    if cli_seed is not None:
        return cli_seed
    if doc_seed is not None:
        return int(doc_seed)
    return int(os.environ.get("AES_SEED", 0))


# -- experiment config files ---------------------------------------------------------------

class ExperimentSpec:
    """Parsed experiment config: base config, graph, environment spec and policy list."""

    def __init__(self, config: ExperimentConfig, graph, env_doc: dict, policies: list,
                 params: dict, base_dir: Path):
        self.config, self.graph, self.env_doc = config, graph, env_doc
        self.policies, self.params, self.base_dir = policies, params, base_dir

    def build_env(self, log_override=None):
        kind = self.env_doc.get("type", "synthetic")
        if log_override is not None:
            kind = "replay"
        if kind == "synthetic":
            seed = self.env_doc.get("seed", self.config.master_seed)
            p_lo = float(self.env_doc.get("p_lo", 0.01))
            p_hi = float(self.env_doc.get("p_hi", 0.30))
            if self.env_doc.get("resample"):
                graph = self.graph
                return _ResampledEnv(graph, seed, p_lo, p_hi)
            return gen_synthetic(self.graph, seed=seed, p_lo=p_lo, p_hi=p_hi)
        if kind == "replay":
            log = log_override or self.env_doc.get("log")
            if not log:
                raise DataError("replay environment needs a 'log' path")
            return aggregate_logs(self._resolve(log), self.graph)
        raise DataError(f"unknown environment type {kind!r}")

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


class _ResampledEnv:
    """Picklable ``rep -> environment`` factory drawing a fresh environment per repetition."""

    def __init__(self, graph, seed, p_lo, p_hi):
        self.graph, self.seed, self.p_lo, self.p_hi = graph, seed, p_lo, p_hi

    def __call__(self, rep):
        return gen_synthetic(self.graph, seed=[self.seed, rep], p_lo=self.p_lo, p_hi=self.p_hi)


def load_experiment(path, seed=None) -> ExperimentSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    base = path.parent
    g = doc.get("graph")
    if g is None:
        graph = default_graph()
    elif isinstance(g, str):
        gp = Path(g)
        graph = load_graph(gp if gp.is_absolute() else base / gp)
    elif isinstance(g, dict) and "counts" in g:
        graph = default_graph(tuple(g["counts"]))
    else:
        graph = graph_from_dict(g)
    policies = doc.get("policy", "aes")
    policies = [policies] if isinstance(policies, str) else list(policies)
    for p in policies:
        if p not in POLICIES:
            raise DataError(f"unknown policy {p!r}; choose from {sorted(POLICIES)}")
    raw = doc.get("policy_params", {}) or {}
    if raw and all(k in POLICIES for k in raw):
        params = {k: dict(v) for k, v in raw.items()}
    else:
        params = {p: dict(raw) for p in policies}
    try:
        config = ExperimentConfig(
            policy=policies[0],
            batch_size=int(doc.get("batch_size", 1000)),
            n_batches=int(doc.get("n_batches", 2000)),
            n_reps=int(doc.get("n_reps", 20)),
            master_seed=_master_seed(seed, doc.get("master_seed")),
            env=dict(doc.get("env", {"type": "synthetic"})),
            record_timing=bool(doc.get("record_timing", True)),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return ExperimentSpec(config, graph, config.env, policies, params, base)


def _write_summary(records: dict, out: Path, extra=None) -> None:
    rows = [rec.summary() for rec in records.values()]
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "final_ctr_mean", "final_ctr_std", "final_regret_mean",
                    "final_regret_std"])
        for r in rows:
            w.writerow([r["policy"], repr(r["final_ctr_mean"]), repr(r["final_ctr_std"]),
                        repr(r["final_regret_mean"]), repr(r["final_regret_std"])])
    print(f"{'policy':<12} {'final CTR':>22} {'final regret':>26}")
    for r in rows:
        print(f"{r['policy']:<12} {r['final_ctr_mean']:>12.5f} ± {r['final_ctr_std']:<8.5f}"
              f" {r['final_regret_mean']:>14.2f} ± {r['final_regret_std']:<10.2f}")


def _run_policies(spec: ExperimentSpec, env, out: Path, jobs: int, no_timing: bool) -> dict:
    config = spec.config
    if no_timing:
        config = replace(config, record_timing=False)
    out.mkdir(parents=True, exist_ok=True)
    records = compare(config, env, spec.policies, spec.params, jobs=jobs)
    for name, rec in records.items():
        rec.write_csv(out / f"{name}.csv")
    return records


# -- subcommands ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = load_experiment(args.config, args.seed)
    env = spec.build_env()
    records = _run_policies(spec, env, Path(args.out), args.jobs, args.no_timing)
    _write_summary(records, Path(args.out))
    return EXIT_OK


def cmd_replay(args) -> int:
    spec = load_experiment(args.config, args.seed)
    env = spec.build_env(log_override=args.log)
    if "random" not in spec.policies:
        spec.policies = spec.policies + ["random"]
    out = Path(args.out)
    records = _run_policies(spec, env, out, args.jobs, args.no_timing)
    with open(out / "lift.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "batch", "ctr_lift"])
        for name, rec in records.items():
            for b, v in enumerate(ctr_lift(rec, records["random"]), start=1):
                w.writerow([name, b, repr(float(v))])
    _write_summary(records, out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = load_experiment(args.config, args.seed)
    env_seed = spec.env_doc.get("seed", spec.config.master_seed)
    config = replace(spec.config, record_timing=not args.no_timing)
    rows, _ = sweep_search_space(args.sizes, config, spec.policies, spec.params,
                                 parent=spec.graph.tree.parent, env_seed=env_seed,
                                 p_lo=float(spec.env_doc.get("p_lo", 0.01)),
                                 p_hi=float(spec.env_doc.get("p_hi", 0.30)), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "n_creatives", "regret_mean", "regret_std"])
        for r in rows:
            w.writerow([r["policy"], r["n_creatives"], repr(r["regret_mean"]),
                        repr(r["regret_std"])])
    for r in rows:
        print(f"{r['policy']:<12} {r['n_creatives']:>7} {r['regret_mean']:>14.2f} ± "
              f"{r['regret_std']:.2f}")
    return EXIT_OK


def cmd_dp_check(args) -> int:
    if args.trials < 0 or args.max_elements < 1 or args.max_ingredients < 1:
        raise UsageError("trials must be >= 0, max-elements and max-ingredients >= 1")
    if args.max_elements ** args.max_ingredients > 100_000:
        raise UsageError("max-elements ** max-ingredients must stay <= 100000")
    rng = np.random.default_rng(_master_seed(args.seed))
    passed = failed = 0
    for trial in range(args.trials):
        graph = random_graph(rng, args.max_ingredients, args.max_elements)
        w = rng.standard_normal(graph.indexer.dimension)
        c_dp, v_dp = dp_argmax(graph, w)
        c_bf, v_bf = brute_force_argmax(graph, w)
        if c_dp == c_bf and abs(v_dp - v_bf) <= 1e-12:
            passed += 1
        else:
            failed += 1
            print(f"trial {trial}: dp {c_dp} {v_dp!r} vs brute force {c_bf} {v_bf!r}")
    print(f"dp-check: {passed}/{args.trials} passed, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_speed_test(args) -> int:
    if not args.sizes or args.impressions < 1 or args.reps < 1:
        raise UsageError("need at least one size, impressions >= 1 and reps >= 1")
    policies = ["full_ts", "mvt", "aes"]
    rows = []
    results = {}
    for size in args.sizes:
        env = gen_synthetic(default_graph(element_counts_for_size(size)), seed=_master_seed(args.seed))
        res = timing_benchmark(policies, env, args.impressions, args.reps, args.batch_size,
                               seed=_master_seed(args.seed))
        results[size] = res
        for p in policies:
            rows.append([p, env.graph.n_creatives, repr(res[p]["mean_time"]),
                         repr(res[p]["std_time"]), repr(res[p]["ops_per_selection"])])
    fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "n_creatives", "mean_time", "std_time", "ops_count"])
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    # the speed claim concerns large search spaces; tiny ones are dominated by fixed overheads
    size = max(args.sizes)
    largest = results[size]
    if size >= SPEED_CHECK_MIN_SIZE and not (
            largest["aes"]["mean_sel_time"] < largest["full_ts"]["mean_sel_time"]):
        print("speed-test: AES selection is not faster than Full-TS at the largest size",
              file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gen_graph(args) -> int:
    if args.counts and args.size:
        raise UsageError("give either --counts or --size")
    counts = tuple(args.counts) if args.counts else element_counts_for_size(args.size or 200)
    if len(counts) == len(DEFAULT_PARENT):
        tree = default_tree(counts)
    else:
        tree = IngredientTree.from_counts(counts, [None] + list(range(len(counts) - 1)))
    graph = build_element_graph(tree)
    if args.weights_seed is not None:
        w = np.random.default_rng(args.weights_seed).standard_normal(graph.indexer.dimension)
        w[0] = 0.0
        graph = graph.with_weight_vector(w)
    text = json.dumps(graph_to_dict(graph, weights=args.weights_seed is not None), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_gen_replay(args) -> int:
    graph = load_graph(args.graph) if args.graph else default_graph()
    generate_replay_log(graph, args.out, seed=_master_seed(args.seed), mean_ctr=args.mean_ctr,
                        impressions=args.impressions, raw=args.raw)
    print(f"wrote {args.out} ({graph.n_creatives} creatives, {args.impressions} impressions)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aes-bandit", description="Tree-structured creative selection bandits.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_args(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="parallel repetitions")
        p.add_argument("--no-timing", action="store_true",
                       help="write sel_time_ns as 0 (byte-reproducible CSV)")

    p = sub.add_parser("simulate", help="run policies on a synthetic or replay environment")
    experiment_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="run policies on an impression log; report lift vs random")
    experiment_args(p)
    p.add_argument("--log", default=None, help="replay log CSV (overrides the config)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="final regret across search-space sizes")
    experiment_args(p)
    p.add_argument("--sizes", type=_int_list, default=[32, 200, 1200])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dp-check", help="compare DP argmax with brute force on random graphs")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-elements", type=int, default=4)
    p.add_argument("--max-ingredients", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_dp_check)

    p = sub.add_parser("speed-test", help="selection wall-clock of full_ts, mvt and aes")
    p.add_argument("--sizes", type=_int_list, default=[32, 200, 1200])
    p.add_argument("--impressions", type=int, default=50_000)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_speed_test)

    p = sub.add_parser("gen-graph", help="write a graph file for the default tree")
    p.add_argument("--counts", type=_int_list, default=None)
    p.add_argument("--size", type=int, default=None, help="target number of creatives")
    p.add_argument("--weights-seed", type=int, default=None,
                   help="also write N(0,1) weights drawn with this seed")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_graph)

    p = sub.add_parser("gen-replay", help="fabricate a replay log from a tree-linear model")
    p.add_argument("--graph", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mean-ctr", type=float, default=0.05)
    p.add_argument("--impressions", type=int, default=850_000)
    p.add_argument("--raw", action="store_true", help="one row per impression")
    p.set_defaults(func=cmd_gen_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aes-bandit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, LogFormatError, ValueError, OSError) as exc:
        print(f"aes-bandit: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
