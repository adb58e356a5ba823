"""HiCuts- and EffiCuts-style heuristic builders used as comparison anchors."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .ruleset import NUM_DIMS, RuleSet
from .tree import DEFAULT_BINTH, DecisionTree, efficuts_signature


@dataclass(frozen=True)
class HiCutsParams:
    spfac: float = 1.0
    max_cuts_per_node: int = 32
    binth: int = DEFAULT_BINTH

    def __post_init__(self):
        if self.spfac <= 0:
            raise ValueError("spfac must be positive")
        if not 2 <= self.max_cuts_per_node <= 32:
            raise ValueError("max_cuts_per_node must be in [2, 32]")


def distinct_endpoints(rs: RuleSet, rules, region, dim: int) -> int:
    """Distinct interval boundaries (starts and one-past-ends) inside the region.

    Equals 2 exactly when every rule spans the whole region in ``dim``.
    """
    lo, hi = region.lo[dim], region.hi[dim]
    a = np.clip(rs.lo[rules, dim], lo, hi)
    b = np.clip(rs.hi[rules, dim], lo, hi) + 1
    return np.unique(np.concatenate([a, b])).size


def _space_measure(rs, rules, lo, hi, dim, k):
    first, last = _kernels.cut_assign(rs.lo[rules, dim], rs.hi[rules, dim], lo, hi, k)
    return int((last - first + 1).sum()) + k


def choose_cut(rs: RuleSet, node, params: HiCutsParams):
    """(dim, k) for a HiCuts cut at ``node``, or None if no cut can separate its rules.

    The dimension has the most distinct clipped rule endpoints. ``k`` starts
    at 2 and doubles while the space measure (child rule refs + k) stays
    within ``spfac`` times the node's rule count.
    """
    best_dim, best_count = None, 2
    for d in range(NUM_DIMS):
        if node.region.width(d) < 2:
            continue
        c = distinct_endpoints(rs, node.rules, node.region, d)
        if c > best_count:
            best_dim, best_count = d, c
    if best_dim is None:
        return None
    lo, hi = node.region.lo[best_dim], node.region.hi[best_dim]
    limit = params.spfac * len(node.rules)
    k = 2
    while k * 2 <= min(params.max_cuts_per_node, hi - lo + 1):
        if _space_measure(rs, node.rules, lo, hi, best_dim, k * 2) > limit:
            break
        k *= 2
    return best_dim, k


def grow_hicuts(tree: DecisionTree, params: HiCutsParams, start=None) -> DecisionTree:
    stack = [tree.root if start is None else start]
    while stack:
        nid = stack.pop()
        if tree.is_terminal(nid):
            continue
        choice = choose_cut(tree.ruleset, tree.nodes[nid], params)
        if choice is None:
            tree.force_leaf(nid, "inseparable")
            continue
        stack.extend(reversed(tree.apply_cut(nid, *choice)))
    return tree


def build_hicuts(rs: RuleSet, params: HiCutsParams = HiCutsParams(), rules=None) -> DecisionTree:
    if len(rs) == 0:
        raise ValueError("rule set is empty")
    return grow_hicuts(DecisionTree(rs, params.binth, rules=rules), params)


def build_efficuts_baseline(rs: RuleSet, params: HiCutsParams = HiCutsParams()) -> list:
    """One HiCuts tree per group of rules sharing a per-dimension largeness signature."""
    if len(rs) == 0:
        raise ValueError("rule set is empty")
    all_rules = np.arange(len(rs), dtype=np.int64)
    sig = efficuts_signature(rs, all_rules)
    return [build_hicuts(rs, params, rules=all_rules[sig == s]) for s in np.unique(sig)]
