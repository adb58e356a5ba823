"""Packet-classification decision trees built by HiCuts, EffiCuts partitioning, or a learned policy."""

__version__ = "0.1.0"

from .ruleset import Rule, RuleSet, generate_rules, linear_match, load_classbench, parse_classbench
from .tree import DecisionTree, Region, lookup, tree_stats
from .baselines import HiCutsParams, build_efficuts_baseline, build_hicuts
from .rlenv import EnvConfig, run_rollout
from .trainer import TrainConfig, train

__all__ = [
    "Rule", "RuleSet", "generate_rules", "linear_match", "load_classbench", "parse_classbench",
    "DecisionTree", "Region", "lookup", "tree_stats",
    "HiCutsParams", "build_efficuts_baseline", "build_hicuts",
    "EnvConfig", "run_rollout", "TrainConfig", "train",
]
