"""Tree building as a branching decision process.

Each expanded node is an independent one-step decision. Its reward is known
only after the subtree below it is finished, and is the negated, scaled
time/space objective of that subtree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ruleset import DIM_BITS, NUM_DIMS, RuleSet
from .tree import (CUT_SIZES, DEFAULT_BINTH, FULL_LEVEL, PARTITION_LEVELS, Cut, DecisionTree,
                   PartitionEffiCuts, PartitionSimple, split_interval)

# operation head: 5 cut sizes, 6 interior simple-partition levels, 1 EffiCuts partition
SIMPLE_LEVELS = tuple(range(1, FULL_LEVEL))
N_CUT_OPS = len(CUT_SIZES)
N_OPS = N_CUT_OPS + len(SIMPLE_LEVELS) + 1
OP_EFFICUTS = N_OPS - 1
N_EFFICUTS_IDS = 1 << NUM_DIMS

_RANGE_BITS = 2 * sum(DIM_BITS)
_PART_BITS = 2 * NUM_DIMS * len(PARTITION_LEVELS)
OBS_LEN = _RANGE_BITS + _PART_BITS + (N_EFFICUTS_IDS + 1) + NUM_DIMS * N_OPS

PARTITION_MODES = ("none", "simple", "efficuts")


@dataclass(frozen=True)
class EnvConfig:
    c: float = 1.0
    reward_scale: str = "linear"  # linear | log
    max_actions: int = 15000
    max_depth: int = 100
    binth: int = DEFAULT_BINTH
    partition: str = "none"
    # also mask cuts in dimensions where every rule spans the node
    mask_useless_cuts: bool = True

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("c must lie in [0, 1]")
        if self.reward_scale not in ("linear", "log"):
            raise ValueError(f"unknown reward scale {self.reward_scale!r}")
        if self.partition not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.partition!r}")
        if self.max_actions <= 0 or self.max_depth <= 0 or self.binth < 0:
            raise ValueError("truncation limits must be positive")

    def scale(self, x):
        x = np.asarray(x, dtype=np.float64)
        # internal nodes always have time >= 1; the clamp only matters for a bare-leaf root
        return np.log(np.maximum(x, 1.0)) if self.reward_scale == "log" else x

    def objective(self, time, space) -> float:
        """Quantity the policy minimises (the negated reward)."""
        return float(self.c * self.scale(time) + (1 - self.c) * self.scale(space))


def decode_action(dim: int, op: int):
    if op < N_CUT_OPS:
        return Cut(dim, CUT_SIZES[op])
    if op < OP_EFFICUTS:
        return PartitionSimple(dim, SIMPLE_LEVELS[op - N_CUT_OPS])
    return PartitionEffiCuts()


def encode_action(action) -> tuple:
    if isinstance(action, Cut):
        return action.dim, CUT_SIZES.index(action.k)
    if isinstance(action, PartitionSimple):
        return action.dim, N_CUT_OPS + SIMPLE_LEVELS.index(action.level)
    return 0, OP_EFFICUTS


# --------------------------------------------------------------------------
# observation and mask

_SHIFTS = [np.arange(b - 1, -1, -1, dtype=np.int64) for b in DIM_BITS]


def encode_observations(nodes, masks: np.ndarray) -> np.ndarray:
    """Fixed-length 0/1 vectors describing nodes, one row per node.

    Layout: for each dimension the big-endian bits of the region's low
    bound then high bound; for each dimension one-hots of the partition
    (min, max) coverage levels; a one-hot of the EffiCuts group (slot 0 =
    none); then the (dim x op) action mask, row-major.
    """
    m = len(nodes)
    out = np.zeros((m, OBS_LEN), dtype=np.uint8)
    if not m:
        return out
    lo = np.array([n.region.lo for n in nodes], dtype=np.int64)
    hi = np.array([n.region.hi for n in nodes], dtype=np.int64)
    pos = 0
    for d in range(NUM_DIMS):
        b = DIM_BITS[d]
        out[:, pos:pos + b] = (lo[:, d, None] >> _SHIFTS[d]) & 1
        out[:, pos + b:pos + 2 * b] = (hi[:, d, None] >> _SHIFTS[d]) & 1
        pos += 2 * b
    nl = len(PARTITION_LEVELS)
    rows = np.arange(m)
    part = np.array([n.partition for n in nodes], dtype=np.int64)  # (m, dims, 2)
    for d in range(NUM_DIMS):
        out[rows, pos + part[:, d, 0]] = 1
        out[rows, pos + nl + part[:, d, 1]] = 1
        pos += 2 * nl
    eff = np.array([0 if n.efficuts_id is None else 1 + n.efficuts_id for n in nodes])
    out[rows, pos + eff] = 1
    pos += N_EFFICUTS_IDS + 1
    out[:, pos:] = np.asarray(masks).reshape(m, -1)
    return out


def encode_observation(node, mask: np.ndarray) -> np.ndarray:
    return encode_observations([node], mask[None])[0]


def action_masks(tree: DecisionTree, nids, cfg: EnvConfig) -> np.ndarray:
    """Boolean (node, dim, op) tables of legal actions.

    Cuts need width >= 2 in their dimension. Partitions are legal only at
    the root and only in the configured partition mode.
    """
    nids = list(nids)
    masks = np.zeros((len(nids), NUM_DIMS, N_OPS), dtype=bool)
    if not nids:
        return masks
    lo = np.array([tree.nodes[i].region.lo for i in nids], dtype=np.int64)
    hi = np.array([tree.nodes[i].region.hi for i in nids], dtype=np.int64)
    cuttable = hi > lo
    if cfg.mask_useless_cuts:
        cuttable &= ~tree.spanned_dims(nids)
    masks[:, :, :N_CUT_OPS] = cuttable[:, :, None]
    for j, nid in enumerate(nids):
        if nid == tree.root:
            if cfg.partition == "simple":
                masks[j, :, N_CUT_OPS:OP_EFFICUTS] = True
            elif cfg.partition == "efficuts":
                masks[j, :, OP_EFFICUTS] = True
    return masks


def valid_action_mask(tree: DecisionTree, nid: int, cfg: EnvConfig) -> np.ndarray:
    return action_masks(tree, [nid], cfg)[0]


# --------------------------------------------------------------------------
# rollouts

@dataclass
class Decision:
    dim: int
    op: int
    logp: float = 0.0
    value: float = 0.0
    probs_a: Optional[np.ndarray] = None
    probs_b: Optional[np.ndarray] = None  # conditional on ``dim``


Sampler = Callable[[np.ndarray, np.ndarray], Decision]


@dataclass
class Experience:
    obs: np.ndarray
    dim: int
    op: int
    mask: np.ndarray
    reward: float
    node_id: int
    logp: float
    value: float


@dataclass
class Rollout:
    tree: DecisionTree
    truncated: bool
    node_ids: list = field(default_factory=list)
    obs: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    dims: list = field(default_factory=list)
    ops: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    values: list = field(default_factory=list)
    probs_a: list = field(default_factory=list)
    probs_b: list = field(default_factory=list)
    rewards: Optional[np.ndarray] = None
    forced: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.node_ids)

    @property
    def experiences(self):
        if self.rewards is None:
            raise RuntimeError("rewards not finalized")
        return [Experience(self.obs[i], self.dims[i], self.ops[i], self.masks[i],
                           float(self.rewards[i]), self.node_ids[i], self.logp[i], self.values[i])
                for i in range(len(self))]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"node": e.node_id, "dim": e.dim, "op": e.op, "reward": e.reward,
                                   "logp": e.logp, "value": e.value}) + "\n"
                       for e in self.experiences)


def run_rollout(rs: RuleSet, cfg: EnvConfig, sampler: Sampler) -> Rollout:
    """Grow one tree in DFS order, asking ``sampler`` for an action at each open node.

    Siblings are encoded together when their parent is expanded. A sampler
    with ``prefetch(obs_rows)`` and ``decide(pre, mask)`` methods gets one
    batched call per expansion; actions are still drawn in DFS order.
    """
    tree = DecisionTree(rs, cfg.binth)
    ro = Rollout(tree, False)
    batched = hasattr(sampler, "prefetch")
    stack = []

    def push(nids):
        if not nids:
            return
        masks = action_masks(tree, nids, cfg)
        obs = encode_observations([tree.nodes[i] for i in nids], masks)
        pre = sampler.prefetch(obs) if batched else [None] * len(nids)
        for j in range(len(nids) - 1, -1, -1):
            stack.append((nids[j], obs[j], masks[j], pre[j]))

    push([] if tree.is_terminal(tree.root) else [tree.root])
    while stack:
        if len(ro) >= cfg.max_actions:
            ro.truncated = True
            for entry in stack:
                tree.force_leaf(entry[0], "truncated")
            ro.forced["truncated"] = ro.forced.get("truncated", 0) + len(stack)
            break
        nid, obs, mask, pre = stack.pop()
        if not mask.any():
            tree.force_leaf(nid, "masked")
            ro.forced["masked"] = ro.forced.get("masked", 0) + 1
            continue
        dec = sampler.decide(pre, mask) if batched else sampler(obs, mask)
        if not mask[dec.dim, dec.op]:
            raise RuntimeError(f"sampler chose masked action ({dec.dim}, {dec.op})")
        children = tree.apply(nid, decode_action(dec.dim, dec.op))
        ro.node_ids.append(nid)
        ro.obs.append(obs)
        ro.masks.append(mask)
        ro.dims.append(dec.dim)
        ro.ops.append(dec.op)
        ro.logp.append(dec.logp)
        ro.values.append(dec.value)
        ro.probs_a.append(dec.probs_a)
        ro.probs_b.append(dec.probs_b)
        open_children = []
        for c in children:
            if tree.is_terminal(c):
                continue
            if tree.nodes[c].depth >= cfg.max_depth:
                tree.force_leaf(c, "truncated")
                ro.truncated = True
                ro.forced["truncated"] = ro.forced.get("truncated", 0) + 1
            else:
                open_children.append(c)
        push(open_children)
    return ro


def penalized_costs(tree: DecisionTree):
    """Subtree (time, space) with truncated leaves charged the deepest depth reached."""
    worst = tree.max_depth()
    return tree.subtree_costs(leaf_time=lambda n: worst if n.forced == "truncated" else 0)


def finalize_rewards(ro: Rollout, cfg: EnvConfig) -> Rollout:
    times, spaces = penalized_costs(ro.tree)
    t = np.array([times[n] for n in ro.node_ids], dtype=np.float64)
    s = np.array([spaces[n] for n in ro.node_ids], dtype=np.float64)
    ro.rewards = -(cfg.c * cfg.scale(t) + (1 - cfg.c) * cfg.scale(s)) if len(ro) else np.zeros(0)
    return ro


def random_sampler(rng: np.random.Generator) -> Sampler:
    """Uniform over legal (dim, op) pairs."""
    def sample(obs, mask):
        flat = np.flatnonzero(mask)
        i = int(flat[rng.integers(flat.size)])
        return Decision(i // N_OPS, i % N_OPS)
    return sample


# --------------------------------------------------------------------------
# exact per-node optimisation on tiny instances

def solve_per_node(rs: RuleSet, binth: int, c: float, dims=tuple(range(NUM_DIMS)), ks=(2, 4),
                   max_depth: int = 3, truncation_time: int = 1000):
    """Build the tree that picks, at every node, the cut minimising its own subtree objective.

    Each node's choice assumes its children were solved the same way; the
    objective is ``c * time + (1 - c) * space`` of the subtree. Open nodes at
    ``max_depth`` (or with no applicable cut) become forced leaves charged
    ``truncation_time``. Returns ``(tree, root_objective)``.
    """
    tree = DecisionTree(rs, binth)
    mem = tree.memory
    memo = {}

    def best(region, rules, depth):
        # rules below the root are fixed by the region, so (region, depth) is a complete key
        key = (region, depth)
        if key in memo:
            return memo[key]
        leaf_space = mem.header + mem.rule_ref * len(rules)
        if len(rules) <= binth:
            out = (0.0 + (1 - c) * leaf_space, 0, leaf_space, None)
        else:
            out = (c * truncation_time + (1 - c) * leaf_space, truncation_time, leaf_space, None)
            if depth < max_depth:
                winner = None
                for d in dims:
                    lo, hi = region.lo[d], region.hi[d]
                    for k in ks:
                        if hi - lo + 1 < k:
                            continue
                        t, s = 0, mem.header + mem.child_ref * k
                        for a, b in split_interval(lo, hi, k):
                            sub = rules[(rs.lo[rules, d] <= b) & (rs.hi[rules, d] >= a)]
                            _, ct, cs, _ = best(region.with_dim(d, a, b), sub, depth + 1)
                            t, s = max(t, ct), s + cs
                        obj = c * (1 + t) + (1 - c) * s
                        if winner is None or obj < winner[0]:
                            winner = (obj, 1 + t, s, (d, k))
                if winner is not None:
                    out = winner
        memo[key] = out
        return out

    def build(nid):
        node = tree.nodes[nid]
        plan = best(node.region, node.rules, node.depth)[3]
        if plan is None:
            if len(node.rules) > binth:
                tree.force_leaf(nid, "truncated")
            return
        for ch in tree.apply_cut(nid, *plan):
            build(ch)

    build(tree.root)
    root = tree.nodes[tree.root]
    return tree, best(root.region, root.rules, 0)[0]


def truncation_leaf_time(truncation_time):
    """``leaf_time`` callback charging forced-truncated leaves a fixed time."""
    return lambda n: truncation_time if n.forced == "truncated" else 0
