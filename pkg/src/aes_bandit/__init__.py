"""Bandit selection of ad creatives over a tree of visual ingredients."""
from .dp import OpCounter, brute_force_argmax, dp_argmax, dp_argmax_batch
from .graph import (
    ElementGraph, FeatureIndexer, GraphError, InfeasibleError, Ingredient, IngredientTree,
    build_element_graph, enumerate_creatives, featurize, is_feasible, load_graph, save_graph,
)
from .model import PosteriorState, expected_reward
from .policies import POLICIES, Policy, make_policy
from .sim import (
    Environment, ExperimentConfig, MetricsRecord, ReplayEnv, SyntheticEnv, aggregate_logs,
    compare, compute_regret, default_graph, gen_synthetic, run_experiment, sweep_search_space,
)

__version__ = "0.1.0"
