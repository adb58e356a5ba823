"""5-tuple rules: ClassBench parsing, ground-truth matching, packet sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

NUM_DIMS = 5
DIM_NAMES = ("src_ip", "dst_ip", "src_port", "dst_port", "proto")
DIM_BITS = (32, 32, 16, 16, 8)
DIM_MAX = tuple((1 << b) - 1 for b in DIM_BITS)

Packet = tuple  # one unsigned int per dimension


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Rule:
    priority: int
    ranges: tuple  # ((lo, hi),) * NUM_DIMS, closed intervals

    def __post_init__(self):
        if len(self.ranges) != NUM_DIMS:
            raise ValueError(f"expected {NUM_DIMS} ranges, got {len(self.ranges)}")
        for d, (lo, hi) in enumerate(self.ranges):
            if not 0 <= lo <= hi <= DIM_MAX[d]:
                raise ValueError(f"bad range [{lo}, {hi}] in {DIM_NAMES[d]}")

    def is_match_all(self) -> bool:
        return all(lo == 0 and hi == DIM_MAX[d] for d, (lo, hi) in enumerate(self.ranges))


class RuleSet:
    """Ordered, immutable rule list. Position is priority: index 0 wins."""

    def __init__(self, rules: Iterable[Rule]):
        self.rules = tuple(rules)
        n = len(self.rules)
        self.lo = np.zeros((n, NUM_DIMS), dtype=np.int64)
        self.hi = np.zeros((n, NUM_DIMS), dtype=np.int64)
        for i, r in enumerate(self.rules):
            self.lo[i] = [a for a, _ in r.ranges]
            self.hi[i] = [b for _, b in r.ranges]
        self.lo.setflags(write=False)
        self.hi.setflags(write=False)

    @classmethod
    def from_arrays(cls, lo, hi) -> "RuleSet":
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        return cls(
            Rule(i, tuple((int(a), int(b)) for a, b in zip(lo[i], hi[i])))
            for i in range(lo.shape[0])
        )

    def __len__(self):
        return len(self.rules)

    def __getitem__(self, i):
        return self.rules[i]

    def __iter__(self):
        return iter(self.rules)

    def __eq__(self, other):
        return isinstance(other, RuleSet) and [r.ranges for r in self] == [r.ranges for r in other]

    def __getstate__(self):
        return {"lo": np.array(self.lo), "hi": np.array(self.hi)}

    def __setstate__(self, state):
        self.__init__(RuleSet.from_arrays(state["lo"], state["hi"]).rules)

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.lo).tobytes())
        h.update(np.ascontiguousarray(self.hi).tobytes())
        return h.hexdigest()

    def to_json(self) -> str:
        return json.dumps(
            {"rules": [{"priority": r.priority, "ranges": [list(x) for x in r.ranges]} for r in self]},
            indent=1,
        )

    def to_classbench(self) -> str:
        return "".join(format_classbench_rule(r) + "\n" for r in self)


# --------------------------------------------------------------------------
# ClassBench text format

_LINE = re.compile(
    r"^@(?P<sip>\d+\.\d+\.\d+\.\d+)/(?P<slen>\d+)\s+"
    r"(?P<dip>\d+\.\d+\.\d+\.\d+)/(?P<dlen>\d+)\s+"
    r"(?P<spl>\d+)\s*:\s*(?P<sph>\d+)\s+"
    r"(?P<dpl>\d+)\s*:\s*(?P<dph>\d+)\s+"
    r"(?P<proto>0[xX][0-9a-fA-F]+)/(?P<mask>0[xX][0-9a-fA-F]+)"
    r"(?P<rest>.*)$"
)


def ip_to_int(s: str) -> int:
    parts = s.split(".")
    if len(parts) != 4 or any(not p.isdigit() or int(p) > 255 for p in parts):
        raise ValueError(f"bad IPv4 address {s!r}")
    out = 0
    for p in parts:
        out = (out << 8) | int(p)
    return out


def int_to_ip(v: int) -> str:
    return ".".join(str((v >> s) & 0xFF) for s in (24, 16, 8, 0))


def prefix_to_range(addr: int, plen: int) -> tuple:
    """``addr/plen`` as a closed interval; host bits of ``addr`` are ignored."""
    if not 0 <= plen <= 32:
        raise ValueError(f"prefix length {plen} outside [0, 32]")
    span = 1 << (32 - plen)
    lo = addr & ~(span - 1) & 0xFFFFFFFF
    return lo, lo + span - 1


def range_to_prefix(lo: int, hi: int) -> tuple:
    span = hi - lo + 1
    if span & (span - 1) or lo % span:
        raise ValueError(f"[{lo}, {hi}] is not a prefix")
    return lo, 32 - (span.bit_length() - 1)


def parse_classbench_line(line: str, lineno: int, priority: int) -> Rule:
    m = _LINE.match(line.strip())
    if not m:
        raise ParseError(lineno, f"malformed rule {line.strip()[:60]!r}")
    try:
        src = prefix_to_range(ip_to_int(m["sip"]), int(m["slen"]))
        dst = prefix_to_range(ip_to_int(m["dip"]), int(m["dlen"]))
    except ValueError as e:
        raise ParseError(lineno, str(e)) from None
    sp = (int(m["spl"]), int(m["sph"]))
    dp = (int(m["dpl"]), int(m["dph"]))
    for lo, hi in (sp, dp):
        if not 0 <= lo <= hi <= 0xFFFF:
            raise ParseError(lineno, f"bad port range {lo} : {hi}")
    proto, mask = int(m["proto"], 16), int(m["mask"], 16)
    if proto > 0xFF or mask not in (0x00, 0xFF):
        raise ParseError(lineno, f"unsupported protocol {m['proto']}/{m['mask']}")
    pr = (proto, proto) if mask == 0xFF else (0, 0xFF)
    if m["rest"].strip():
        log.warning("line %d: ignoring trailing fields %r", lineno, m["rest"].strip())
    return Rule(priority, (src, dst, sp, dp, pr))


def parse_classbench(text: str) -> RuleSet:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if not s.startswith("@"):
            raise ParseError(lineno, "rule lines must start with '@'")
        rules.append(parse_classbench_line(s, lineno, len(rules)))
    return RuleSet(rules)


def load_classbench(path) -> RuleSet:
    with open(path) as f:
        return parse_classbench(f.read())


def format_classbench_rule(rule: Rule) -> str:
    (s0, s1), (d0, d1), sp, dp, (p0, p1) = rule.ranges
    sa, sl = range_to_prefix(s0, s1)
    da, dl = range_to_prefix(d0, d1)
    if p0 == p1:
        proto = f"0x{p0:02X}/0xFF"
    elif (p0, p1) == (0, 0xFF):
        proto = "0x00/0x00"
    else:
        raise ValueError(f"protocol range [{p0}, {p1}] has no exact/wildcard form")
    return (f"@{int_to_ip(sa)}/{sl}\t{int_to_ip(da)}/{dl}\t"
            f"{sp[0]} : {sp[1]}\t{dp[0]} : {dp[1]}\t{proto}")


# --------------------------------------------------------------------------
# matching

def rule_matches(rule: Rule, pkt: Sequence[int]) -> bool:
    return all(lo <= v <= hi for (lo, hi), v in zip(rule.ranges, pkt))


def linear_match(rs: RuleSet, pkt: Sequence[int]) -> Optional[int]:
    for i, r in enumerate(rs.rules):
        if rule_matches(r, pkt):
            return i
    return None


def linear_match_batch(rs: RuleSet, packets) -> np.ndarray:
    """Vectorised ``linear_match``; -1 marks no match."""
    return _kernels.first_match(rs.lo, rs.hi, packets)


def rule_intersects(rule: Rule, region) -> bool:
    return all(rlo <= hi and lo <= rhi
               for (rlo, rhi), lo, hi in zip(rule.ranges, region.lo, region.hi))


# --------------------------------------------------------------------------
# sampling and synthetic rule sets

def sample_packets(rs: RuleSet, n: int, seed: int) -> np.ndarray:
    """``n`` packets as an (n, 5) int64 array.

    Half are uniform over the whole space; the rest are drawn from a random
    rule, each field at the rule's low corner, high corner, or uniformly inside.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    top = np.array(DIM_MAX, dtype=np.int64) + 1
    out = (rng.random((n, NUM_DIMS)) * top).astype(np.int64)
    if len(rs) == 0:
        return out
    m = n // 2
    pick = rng.integers(0, len(rs), size=m)
    lo, hi = rs.lo[pick], rs.hi[pick]
    inner = lo + (rng.random((m, NUM_DIMS)) * (hi - lo + 1)).astype(np.int64)
    how = rng.integers(0, 3, size=(m, NUM_DIMS))
    out[n - m:] = np.select([how == 0, how == 1], [lo, hi], inner)
    return out


_WELL_KNOWN = (20, 21, 22, 23, 25, 53, 80, 110, 123, 143, 161, 443, 993, 1521, 3306, 8080)


def generate_rules(n: int, seed: int, style: str = "fw", default_rule: bool = True) -> RuleSet:
    """Synthetic ClassBench-like rule set.

    ``style`` is one of ``acl`` (specific addresses, exact ports), ``fw``
    (many wildcards and port ranges) or ``ipc`` (in between).
    """
    probs = {
        # P(src wildcard), P(dst wildcard), P(port wildcard), P(port range), P(proto wildcard)
        "acl": (0.05, 0.02, 0.6, 0.15, 0.05),
        "fw": (0.12, 0.07, 0.45, 0.35, 0.3),
        "ipc": (0.1, 0.05, 0.5, 0.3, 0.15),
    }[style]
    rng = np.random.default_rng(seed)
    # A handful of address "sites" so prefixes nest and overlap like real policies.
    sites = rng.integers(0, 1 << 32, size=max(4, n // 40), dtype=np.int64)

    def addr(p_wild):
        if rng.random() < p_wild:
            return (0, DIM_MAX[0])
        plen = int(rng.choice([8, 16, 20, 24, 28, 32], p=[0.05, 0.15, 0.1, 0.3, 0.15, 0.25]))
        base = int(sites[rng.integers(sites.size)]) ^ int(rng.integers(0, 1 << max(0, 32 - 8)))
        return prefix_to_range(base, plen)

    def port():
        u = rng.random()
        if u < probs[2]:
            return (0, 0xFFFF)
        if u < probs[2] + probs[3]:
            a = int(rng.choice([0, 1024, int(rng.integers(0, 60000))]))
            b = int(min(0xFFFF, a + rng.integers(1, 1 << int(rng.integers(1, 16)))))
            return (a, b) if a > 0 or b < 0xFFFF else (1024, 0xFFFF)
        p = int(rng.choice(_WELL_KNOWN)) if rng.random() < 0.8 else int(rng.integers(0, 0x10000))
        return (p, p)

    def proto():
        if rng.random() < probs[4]:
            return (0, 0xFF)
        p = int(rng.choice([6, 17, 1, 47], p=[0.6, 0.3, 0.07, 0.03]))
        return (p, p)

    count = n - 1 if default_rule else n
    rules = [Rule(i, (addr(probs[0]), addr(probs[1]), port(), port(), proto())) for i in range(count)]
    if default_rule:
        rules.append(Rule(count, tuple((0, m) for m in DIM_MAX)))
    return RuleSet(rules)
