"""Decision trees over rule sets: cuts, partitions, lookup, and cost accounting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import _kernels
from .ruleset import DIM_MAX, DIM_NAMES, NUM_DIMS, RuleSet

CUT_SIZES = (2, 4, 8, 16, 32)
# Rule-coverage levels (percent) used by simple partitions and partition state.
PARTITION_LEVELS = (0, 2, 4, 8, 16, 32, 64, 100)
FULL_LEVEL = len(PARTITION_LEVELS) - 1
DEFAULT_BINTH = 16


class TreeError(RuntimeError):
    """Operation applied to a node in the wrong state."""


class Region(NamedTuple):
    """Axis-aligned box of closed intervals; ``lo[d] <= hi[d]`` per dimension."""

    lo: tuple
    hi: tuple

    @classmethod
    def checked(cls, lo, hi) -> "Region":
        lo, hi = tuple(int(v) for v in lo), tuple(int(v) for v in hi)
        if len(lo) != NUM_DIMS or len(hi) != NUM_DIMS:
            raise ValueError("region needs one interval per dimension")
        for d, (a, b) in enumerate(zip(lo, hi)):
            if not 0 <= a <= b <= DIM_MAX[d]:
                raise ValueError(f"bad interval [{a}, {b}] in dimension {d}")
        return cls(lo, hi)

    @classmethod
    def full(cls) -> "Region":
        return cls((0,) * NUM_DIMS, tuple(DIM_MAX))

    @classmethod
    def point(cls, pkt) -> "Region":
        p = tuple(int(v) for v in pkt)
        return cls(p, p)

    def width(self, dim: int) -> int:
        return self.hi[dim] - self.lo[dim] + 1

    def contains(self, pkt) -> bool:
        return all(a <= v <= b for a, v, b in zip(self.lo, pkt, self.hi))

    def with_dim(self, dim: int, lo: int, hi: int) -> "Region":
        l, h = list(self.lo), list(self.hi)
        l[dim], h[dim] = lo, hi
        return Region(tuple(l), tuple(h))


@dataclass(frozen=True)
class Cut:
    dim: int
    k: int


@dataclass(frozen=True)
class PartitionSimple:
    dim: int
    level: int


@dataclass(frozen=True)
class PartitionEffiCuts:
    pass


Action = Union[Cut, PartitionSimple, PartitionEffiCuts]


@dataclass(frozen=True)
class MemoryModel:
    """Bytes charged per node: a fixed header plus 4-byte references."""

    header: int = 16
    child_ref: int = 4
    rule_ref: int = 4


@dataclass(slots=True)
class Node:
    id: int
    region: Region
    rules: np.ndarray  # ascending rule indices
    depth: int = 0
    parent: Optional[int] = None
    kind: str = "leaf"  # leaf | cut | partition
    action: Optional[Action] = None
    children: List[int] = field(default_factory=list)
    # (min_level, max_level) per dimension, indices into PARTITION_LEVELS
    partition: tuple = ((0, FULL_LEVEL),) * NUM_DIMS
    efficuts_id: Optional[int] = None
    forced: Optional[str] = None  # truncated | masked | inseparable
    note: Optional[str] = None  # clamp / degenerate-partition record

    @property
    def is_leaf(self) -> bool:
        return not self.children


def split_interval(lo: int, hi: int, k: int) -> list:
    """``[lo, hi]`` in ``k`` contiguous near-equal pieces, wider pieces first."""
    q, r = divmod(hi - lo + 1, k)
    out, a = [], lo
    for j in range(k):
        b = a + q + (1 if j < r else 0) - 1
        out.append((a, b))
        a = b + 1
    return out


def rule_coverage_pct_ge(rs: RuleSet, rules, dim, lo, hi, pct) -> np.ndarray:
    """Mask of rules whose overlap with ``[lo, hi]`` is at least ``pct`` percent of it."""
    a = np.maximum(rs.lo[rules, dim], lo)
    b = np.minimum(rs.hi[rules, dim], hi)
    overlap = np.maximum(b - a + 1, 0)
    # exact integer comparison; widths below 2**33 keep the product inside int64
    return overlap * 100 >= pct * (hi - lo + 1)


def efficuts_signature(rs: RuleSet, rules) -> np.ndarray:
    """Bit d set when a rule spans at least half the full range of dimension d."""
    width = rs.hi[rules] - rs.lo[rules] + 1
    full = np.array(DIM_MAX, dtype=np.int64) + 1
    large = width * 2 >= full
    return (large * (1 << np.arange(NUM_DIMS))).sum(axis=1)


class DecisionTree:
    def __init__(self, ruleset: RuleSet, binth: int = DEFAULT_BINTH, rules=None,
                 memory: MemoryModel = MemoryModel()):
        self.ruleset = ruleset
        self.binth = binth
        self.memory = memory
        root_rules = np.arange(len(ruleset), dtype=np.int64) if rules is None else np.sort(np.asarray(rules, dtype=np.int64))
        self.nodes: List[Node] = [Node(0, Region.full(), root_rules)]
        self.root = 0

    def __len__(self):
        return len(self.nodes)

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def _add(self, parent: Node, region: Region, rules, **kw) -> int:
        nid = len(self.nodes)
        kw.setdefault("partition", parent.partition)
        kw.setdefault("efficuts_id", parent.efficuts_id)
        self.nodes.append(Node(nid, region, rules, parent.depth + 1, parent.id, **kw))
        parent.children.append(nid)
        return nid

    def is_terminal(self, nid: int) -> bool:
        return len(self.nodes[nid].rules) <= self.binth

    def _check_open(self, node: Node):
        if node.children or node.forced:
            raise TreeError(f"node {node.id} is already expanded")
        if self.is_terminal(node.id):
            raise TreeError(f"node {node.id} is terminal")

    # -- actions ------------------------------------------------------------

    def apply_cut(self, nid: int, dim: int, k: int) -> list:
        node = self.nodes[nid]
        self._check_open(node)
        if k not in CUT_SIZES:
            raise TreeError(f"cut size {k} not in {CUT_SIZES}")
        lo, hi = node.region.lo[dim], node.region.hi[dim]
        width = hi - lo + 1
        if width < 2:
            raise TreeError(f"node {nid} has unit width in dimension {dim}")
        if k > width:
            node.note = f"clamped k={k} to {width}"
            k = width
        rs = self.ruleset
        ptr, flat = _kernels.cut_children(rs.lo, rs.hi, node.rules, dim, lo, hi, k)
        node.kind = "cut"
        node.action = Cut(dim, k)
        # hot path: build children directly rather than through _add
        rlo, rhi = node.region.lo, node.region.hi
        head_lo, tail_lo = rlo[:dim], rlo[dim + 1:]
        head_hi, tail_hi = rhi[:dim], rhi[dim + 1:]
        base, depth, part, eff = len(self.nodes), node.depth + 1, node.partition, node.efficuts_id
        new = [Node(base + j, Region(head_lo + (a,) + tail_lo, head_hi + (b,) + tail_hi),
                    flat[ptr[j]:ptr[j + 1]], depth, nid, "leaf", None, [], part, eff)
               for j, (a, b) in enumerate(split_interval(lo, hi, k))]
        self.nodes.extend(new)
        node.children = list(range(base, base + len(new)))
        return list(node.children)

    def apply_partition_simple(self, nid: int, dim: int, level: int) -> list:
        node = self.nodes[nid]
        self._check_open(node)
        if not 0 <= level < len(PARTITION_LEVELS):
            raise TreeError(f"partition level {level} out of range")
        lo, hi = node.region.lo[dim], node.region.hi[dim]
        large = rule_coverage_pct_ge(self.ruleset, node.rules, dim, lo, hi, PARTITION_LEVELS[level])
        node.kind = "partition"
        node.action = PartitionSimple(dim, level)
        out = []
        pmin, pmax = node.partition[dim]
        for sel, bounds in ((large, (max(pmin, level), pmax)), (~large, (pmin, min(pmax, level)))):
            if sel.any():
                part = list(node.partition)
                part[dim] = bounds
                out.append(self._add(node, node.region, node.rules[sel], partition=tuple(part)))
        if len(out) == 1:
            node.note = "degenerate partition"
        return out

    def apply_partition_efficuts(self, nid: int) -> list:
        node = self.nodes[nid]
        if nid != self.root:
            raise TreeError("EffiCuts partition is only allowed at the root")
        self._check_open(node)
        sig = efficuts_signature(self.ruleset, node.rules)
        node.kind = "partition"
        node.action = PartitionEffiCuts()
        out = [self._add(node, Region.full(), node.rules[sig == s], efficuts_id=int(s))
               for s in np.unique(sig)]
        if len(out) == 1:
            node.note = "degenerate partition"
        return out

    def apply(self, nid: int, action: Action) -> list:
        if isinstance(action, Cut):
            return self.apply_cut(nid, action.dim, action.k)
        if isinstance(action, PartitionSimple):
            return self.apply_partition_simple(nid, action.dim, action.level)
        if isinstance(action, PartitionEffiCuts):
            return self.apply_partition_efficuts(nid)
        raise TypeError(f"unknown action {action!r}")

    def force_leaf(self, nid: int, reason: str):
        node = self.nodes[nid]
        if node.children:
            raise TreeError(f"node {nid} is internal")
        node.forced = reason

    # -- traversal ------------------------------------------------------------

    def postorder(self, nid: Optional[int] = None):
        """Node ids below ``nid`` (default root), children before parents."""
        start = self.root if nid is None else nid
        order, stack = [], [start]
        while stack:
            n = stack.pop()
            order.append(n)
            stack.extend(self.nodes[n].children)
        return order[::-1]

    def open_leaves(self) -> list:
        return [n.id for n in self.nodes
                if n.is_leaf and not n.forced and not self.is_terminal(n.id)]

    def is_complete(self) -> bool:
        return not self.open_leaves()

    def leaf_cost(self, node: Node) -> int:
        return self.memory.header + self.memory.rule_ref * len(node.rules)

    def node_cost(self, node: Node) -> int:
        if node.is_leaf:
            return self.leaf_cost(node)
        return self.memory.header + self.memory.child_ref * len(node.children)

    def subtree_costs(self, nid: Optional[int] = None, leaf_time=None):
        """Subtree time and space for every node under ``nid``.

        Cut nodes take ``1 + max`` over children, partition nodes ``1 + sum``;
        space is always own cost plus the children's. ``leaf_time`` may
        override the (zero) time charged to a leaf.
        """
        times, spaces = {}, {}
        for n in self.postorder(nid):
            node = self.nodes[n]
            if node.is_leaf:
                if not node.forced and not self.is_terminal(n):
                    raise TreeError(f"subtree contains unbuilt node {n}")
                times[n] = 0 if leaf_time is None else leaf_time(node)
                spaces[n] = self.leaf_cost(node)
                continue
            ct = [times[c] for c in node.children]
            times[n] = 1 + (sum(ct) if node.kind == "partition" else max(ct))
            spaces[n] = self.node_cost(node) + sum(spaces[c] for c in node.children)
        return times, spaces

    def subtree_time(self, nid: Optional[int] = None) -> int:
        nid = self.root if nid is None else nid
        return self.subtree_costs(nid)[0][nid]

    def subtree_space(self, nid: Optional[int] = None) -> int:
        nid = self.root if nid is None else nid
        return self.subtree_costs(nid)[1][nid]

    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def spanned_dims(self, nids) -> np.ndarray:
        """(len(nids), 5) mask: every rule of the node spans its region in that dimension."""
        nodes = [self.nodes[i] for i in nids]
        counts = [len(n.rules) for n in nodes]
        ptr = np.zeros(len(nodes) + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        flat = np.concatenate([n.rules for n in nodes]) if nodes else np.zeros(0, dtype=np.int64)
        reg_lo = np.array([n.region.lo for n in nodes], dtype=np.int64).reshape(-1, NUM_DIMS)
        reg_hi = np.array([n.region.hi for n in nodes], dtype=np.int64).reshape(-1, NUM_DIMS)
        return _kernels.covers(self.ruleset.lo, self.ruleset.hi, ptr, flat.astype(np.int64), reg_lo, reg_hi)


# --------------------------------------------------------------------------
# lookup

def lookup(trees: Sequence[DecisionTree], pkt) -> Optional[int]:
    """Highest-priority rule matching ``pkt`` across all trees."""
    best = None
    for t in trees:
        rs = t.ruleset
        stack = [t.root]
        while stack:
            node = t.nodes[stack.pop()]
            if not node.region.contains(pkt):
                continue
            if node.is_leaf:
                for r in node.rules:
                    if best is not None and r >= best:
                        break
                    if all(rs.lo[r, d] <= pkt[d] <= rs.hi[r, d] for d in range(NUM_DIMS)):
                        best = int(r)
                        break
            elif node.kind == "cut":
                dim = node.action.dim
                v = pkt[dim]
                for c in node.children:
                    creg = t.nodes[c].region
                    if creg.lo[dim] <= v <= creg.hi[dim]:
                        stack.append(c)
                        break
            else:
                stack.extend(node.children)
    return best


def flatten_forest(trees: Sequence[DecisionTree]):
    """Arrays consumed by ``_kernels.forest_lookup``."""
    kinds, lo, hi, cptr, cidx, rptr, ridx, roots = [], [], [], [0], [], [0], [], []
    for t in trees:
        base = len(kinds)
        roots.append(base + t.root)
        for node in t.nodes:
            kinds.append(0 if node.is_leaf else 1 if node.kind == "cut" else 2)
            lo.append(node.region.lo)
            hi.append(node.region.hi)
            cidx.extend(base + c for c in node.children)
            cptr.append(len(cidx))
            if node.is_leaf:
                ridx.extend(node.rules.tolist())
            rptr.append(len(ridx))
    rs = trees[0].ruleset
    i64 = lambda x: np.asarray(x, dtype=np.int64)
    return (i64(kinds), i64(lo).reshape(-1, NUM_DIMS), i64(hi).reshape(-1, NUM_DIMS),
            i64(cptr), i64(cidx), i64(rptr), i64(ridx), i64(roots),
            np.ascontiguousarray(rs.lo), np.ascontiguousarray(rs.hi))


def lookup_batch(trees: Sequence[DecisionTree], packets) -> np.ndarray:
    """``lookup`` over an (m, 5) packet array; -1 marks no match."""
    return _kernels.forest_lookup(flatten_forest(trees), np.asarray(packets, dtype=np.int64))


# --------------------------------------------------------------------------
# statistics

@dataclass
class StatsReport:
    time: int
    bytes_total: int
    bytes_per_rule: float
    nodes: int
    replication: float
    num_trees: int
    levels: list  # per depth: {"level", "nodes", "leaves", "partitions", "cuts": [per dim]}

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in
                ("time", "bytes_total", "bytes_per_rule", "nodes", "replication", "num_trees")}


def tree_stats(trees: Sequence[DecisionTree]) -> StatsReport:
    """Worst lookup time over trees, total bytes, and per-level shape."""
    n_rules = max(1, len(trees[0].ruleset))
    time = 0
    total = 0
    refs = 0
    count = 0
    levels: dict = {}
    for t in trees:
        times, spaces = t.subtree_costs()
        time = max(time, times[t.root])
        total += spaces[t.root]
        count += len(t.nodes)
        for node in t.nodes:
            lv = levels.setdefault(node.depth, {"level": node.depth, "nodes": 0, "leaves": 0,
                                                "partitions": 0, "cuts": [0] * NUM_DIMS})
            lv["nodes"] += 1
            if node.is_leaf:
                lv["leaves"] += 1
                refs += len(node.rules)
            elif node.kind == "partition":
                lv["partitions"] += 1
            else:
                lv["cuts"][node.action.dim] += 1
    return StatsReport(time, total, total / n_rules, count, refs / n_rules, len(trees),
                       [levels[d] for d in sorted(levels)])


def levels_csv(report: StatsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "nodes", "leaves", "partitions"] + [f"cut_{d}" for d in DIM_NAMES])
    for lv in report.levels:
        w.writerow([lv["level"], lv["nodes"], lv["leaves"], lv["partitions"]] + lv["cuts"])
    return buf.getvalue()


# --------------------------------------------------------------------------
# export / import

def _action_to_json(a: Optional[Action]):
    if a is None:
        return None
    if isinstance(a, Cut):
        return {"type": "cut", "dim": a.dim, "k": a.k}
    if isinstance(a, PartitionSimple):
        return {"type": "partition_simple", "dim": a.dim, "level": a.level}
    return {"type": "partition_efficuts"}


def _action_from_json(d) -> Optional[Action]:
    if d is None:
        return None
    if d["type"] == "cut":
        return Cut(d["dim"], d["k"])
    if d["type"] == "partition_simple":
        return PartitionSimple(d["dim"], d["level"])
    if d["type"] == "partition_efficuts":
        return PartitionEffiCuts()
    raise ValueError(f"unknown action type {d['type']!r}")


def tree_to_dict(t: DecisionTree) -> dict:
    return {
        "binth": t.binth,
        "root": t.root,
        "memory": [t.memory.header, t.memory.child_ref, t.memory.rule_ref],
        "nodes": [
            {
                "id": n.id,
                "depth": n.depth,
                "kind": n.kind,
                "region": [[a, b] for a, b in zip(n.region.lo, n.region.hi)],
                "action": _action_to_json(n.action),
                "children": list(n.children),
                "rules": n.rules.tolist(),
                "partition": [list(p) for p in n.partition],
                "efficuts_id": n.efficuts_id,
                "forced": n.forced,
            }
            for n in t.nodes
        ],
    }


def tree_from_dict(d: dict, ruleset: RuleSet) -> DecisionTree:
    t = DecisionTree(ruleset, d["binth"], memory=MemoryModel(*d.get("memory", (16, 4, 4))))
    nodes = []
    for nd in d["nodes"]:
        region = Region.checked([r[0] for r in nd["region"]], [r[1] for r in nd["region"]])
        nodes.append(Node(nd["id"], region, np.asarray(nd["rules"], dtype=np.int64), nd["depth"],
                          None, nd["kind"], _action_from_json(nd["action"]), list(nd["children"]),
                          tuple(tuple(p) for p in nd["partition"]), nd["efficuts_id"], nd["forced"]))
    for n in nodes:
        for c in n.children:
            nodes[c].parent = n.id
    t.nodes = nodes
    t.root = d["root"]
    return t


def forest_to_json(trees: Sequence[DecisionTree], extra: Optional[dict] = None) -> str:
    doc = {"format": "cutlearn-forest/1", "rules_sha256": trees[0].ruleset.sha256(),
           "num_rules": len(trees[0].ruleset), "trees": [tree_to_dict(t) for t in trees]}
    if extra:
        doc.update(extra)
    return json.dumps(doc)


def forest_from_json(text: str, ruleset: RuleSet, check_hash: bool = True) -> List[DecisionTree]:
    doc = json.loads(text)
    if check_hash and doc["rules_sha256"] != ruleset.sha256():
        raise ValueError("tree export was built for a different rule set")
    return [tree_from_dict(d, ruleset) for d in doc["trees"]]


def forest_to_dot(trees: Sequence[DecisionTree]) -> str:
    lines = ["digraph forest {", "  node [shape=box, fontsize=9];"]
    for i, t in enumerate(trees):
        for n in t.nodes:
            if n.is_leaf:
                label = f"leaf {len(n.rules)} rules" + (f" ({n.forced})" if n.forced else "")
            elif n.kind == "cut":
                label = f"cut {DIM_NAMES[n.action.dim]} x{n.action.k}"
            else:
                label = "partition"
            lines.append(f'  t{i}n{n.id} [label="{label}"];')
            lines.extend(f"  t{i}n{n.id} -> t{i}n{c};" for c in n.children)
    lines.append("}")
    return "\n".join(lines) + "\n"
