import logging
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutlearn.ruleset import (DIM_MAX, ParseError, Rule, RuleSet, generate_rules, int_to_ip, ip_to_int,
                              linear_match, linear_match_batch, parse_classbench, parse_classbench_line,
                              prefix_to_range, range_to_prefix, rule_intersects, rule_matches,
                              sample_packets)
from cutlearn.tree import Region

from conftest import FIG1_TEXT, rulesets

FULL = tuple((0, m) for m in DIM_MAX)


def pkt(src, dst, sp, dp, proto):
    return (ip_to_int(src), ip_to_int(dst), sp, dp, proto)


# -- parsing ------------------------------------------------------------------

def test_fig1_rule1_semantics(fig1):
    r = fig1[0]
    assert r.ranges == ((0x0A000001, 0x0A000001), (0x0A000000, 0x0A00FFFF),
                        (0, 65535), (0, 65535), (0, 255))


def test_default_rule_is_match_all():
    rs = parse_classbench("@0.0.0.0/0 0.0.0.0/0 0 : 65535 0 : 65535 0x00/0x00\n")
    assert rs[0].ranges == FULL
    assert rs[0].is_match_all()


def test_exact_protocol():
    r = parse_classbench_line("@0.0.0.0/0 0.0.0.0/0 0 : 1023 0 : 1023 0x06/0xFF", 1, 0)
    assert r.ranges[4] == (6, 6)
    assert r.ranges[2] == (0, 1023)


def test_prefix_length_over_32_rejected():
    with pytest.raises(ParseError, match="line 1"):
        parse_classbench("@10.0.0.1/33 10.0.0.0/16 0 : 65535 0 : 65535 0x00/0x00\n")


def test_error_names_the_bad_line():
    text = FIG1_TEXT + "@1.2.3.4/32 garbage\n"
    with pytest.raises(ParseError) as e:
        parse_classbench(text)
    assert e.value.lineno == 4


@pytest.mark.parametrize("line", [
    "@1.2.3.4/32 1.2.3.4/32 0 : 10 0 : 10 0x06/0x0F",  # partial mask
    "@1.2.3.4/32 1.2.3.4/32 10 : 0 0 : 10 0x06/0xFF",  # lo > hi
    "@1.2.3.4/32 1.2.3.4/32 0 : 70000 0 : 10 0x06/0xFF",  # port too wide
    "@1.2.3.999/32 1.2.3.4/32 0 : 1 0 : 1 0x06/0xFF",  # octet too wide
    "1.2.3.4/32 1.2.3.4/32 0 : 1 0 : 1 0x06/0xFF",  # missing '@'
])
def test_malformed_lines(line):
    with pytest.raises(ParseError):
        parse_classbench(line)


def test_blank_and_comment_lines_skipped():
    rs = parse_classbench("# header\n\n" + FIG1_TEXT + "\n")
    assert len(rs) == 3
    assert [r.priority for r in rs] == [0, 1, 2]


def test_trailing_fields_warn(caplog):
    with caplog.at_level(logging.WARNING):
        rs = parse_classbench("@0.0.0.0/0 0.0.0.0/0 0 : 65535 0 : 65535 0x00/0x00 0x0000/0x0200\n")
    assert len(rs) == 1
    assert "trailing" in caplog.text


def test_host_bits_ignored():
    assert prefix_to_range(ip_to_int("10.1.2.3"), 16) == (ip_to_int("10.1.0.0"), ip_to_int("10.1.255.255"))


@given(st.integers(0, (1 << 32) - 1), st.integers(0, 32))
def test_prefix_alignment(addr, plen):
    lo, hi = prefix_to_range(addr, plen)
    span = 1 << (32 - plen)
    assert hi - lo + 1 == span
    assert lo % span == 0
    assert lo <= addr <= hi
    assert range_to_prefix(lo, hi) == (lo, plen)


@given(st.integers(0, (1 << 32) - 1))
def test_ip_text_round_trip(v):
    assert ip_to_int(int_to_ip(v)) == v


def test_classbench_round_trip():
    rs = generate_rules(300, 3, "fw")
    assert parse_classbench(rs.to_classbench()) == rs


def test_non_prefix_rules_cannot_be_written():
    rs = RuleSet([Rule(0, ((1, 2),) + FULL[1:])])
    with pytest.raises(ValueError):
        rs.to_classbench()


def test_rule_validation():
    with pytest.raises(ValueError):
        Rule(0, ((5, 4),) + FULL[1:])
    with pytest.raises(ValueError):
        Rule(0, FULL[:4])
    with pytest.raises(ValueError):
        Rule(0, FULL[:4] + ((0, 256),))


def test_ruleset_arrays_read_only(fig1):
    with pytest.raises(ValueError):
        fig1.lo[0, 0] = 1


def test_json_dump(fig1):
    import json
    doc = json.loads(fig1.to_json())
    assert doc["rules"][2]["ranges"] == [list(x) for x in FULL]


def test_pickle_and_hash(fig1):
    back = pickle.loads(pickle.dumps(fig1))
    assert back == fig1
    assert back.sha256() == fig1.sha256()
    assert fig1.sha256() != generate_rules(3, 0).sha256()


# -- matching -----------------------------------------------------------------

def test_fig1_rule2_tcp(fig1):
    p = pkt("1.2.3.4", "5.6.7.8", 80, 443, 6)
    assert rule_matches(fig1[1], p)
    assert not rule_matches(fig1[1], p[:4] + (17,))


def test_match_all_matches_anything(fig1):
    for p in sample_packets(fig1, 50, 0):
        assert rule_matches(fig1[2], tuple(p))


def test_linear_match_priority(fig1):
    # matches rules 1 and 3
    assert linear_match(fig1, pkt("10.0.0.1", "10.0.3.4", 5000, 80, 17)) == 0
    assert linear_match(fig1, pkt("9.9.9.9", "9.9.9.9", 5000, 5000, 17)) == 2
    assert linear_match(RuleSet([]), pkt("9.9.9.9", "9.9.9.9", 5000, 5000, 17)) is None


@settings(max_examples=60, deadline=None)
@given(rulesets(), st.integers(0, 2**31))
def test_linear_match_is_first_match(rs, seed):
    pkts = sample_packets(rs, 64, seed)
    batch = linear_match_batch(rs, pkts)
    for p, b in zip(pkts, batch):
        i = linear_match(rs, tuple(p))
        assert (-1 if i is None else i) == b
        if i is not None:
            assert rule_matches(rs[i], tuple(p))
            assert not any(rule_matches(rs[j], tuple(p)) for j in range(i))


@settings(max_examples=60, deadline=None)
@given(rulesets(max_size=10), st.integers(0, 2**31))
def test_match_implies_point_intersection(rs, seed):
    for p in sample_packets(rs, 32, seed):
        p = tuple(int(v) for v in p)
        for r in rs:
            if rule_matches(r, p):
                assert rule_intersects(r, Region.point(p))


def test_intersects_examples(grid):
    assert rule_intersects(Rule(0, FULL), Region((5,) * 5, (9,) * 5))
    reg = Region.full()
    from cutlearn.tree import split_interval
    for a, b in split_interval(0, DIM_MAX[0], 4):
        assert rule_intersects(grid[1], reg.with_dim(0, a, b))
    r = Rule(0, ((0, 10),) + FULL[1:])
    assert not rule_intersects(r, reg.with_dim(0, 11, 20))


# -- sampling -----------------------------------------------------------------

def test_sampling_deterministic(fig1):
    assert np.array_equal(sample_packets(fig1, 10, 42), sample_packets(fig1, 10, 42))
    assert not np.array_equal(sample_packets(fig1, 10, 42), sample_packets(fig1, 10, 43))


def test_sampling_hits_every_rule(fig1):
    hits = set(linear_match_batch(fig1, sample_packets(fig1, 1000, 0)).tolist())
    assert {0, 1, 2} <= hits


def test_sampling_in_range():
    rs = generate_rules(50, 1)
    p = sample_packets(rs, 2000, 5)
    assert p.shape == (2000, 5)
    assert (p >= 0).all() and (p <= np.array(DIM_MAX)).all()


def test_sampling_needs_positive_n(fig1):
    with pytest.raises(ValueError):
        sample_packets(fig1, 0, 1)


@pytest.mark.parametrize("style", ["acl", "fw", "ipc"])
def test_generator(style):
    rs = generate_rules(200, 7, style)
    assert len(rs) == 200
    assert rs[-1].is_match_all()
    assert generate_rules(200, 7, style) == rs
    assert len(generate_rules(20, 7, style, default_rule=False)) == 20
