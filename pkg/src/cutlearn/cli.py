"""Command-line driver: validate, build, train, eval, compare."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import HiCutsParams, build_efficuts_baseline, build_hicuts
from .rlenv import PARTITION_MODES, EnvConfig
from .ruleset import (DIM_MAX, DIM_NAMES, ParseError, RuleSet, linear_match_batch, load_classbench,
                      sample_packets)
from .trainer import TrainConfig, train
from .tree import (StatsReport, forest_from_json, forest_to_dot, forest_to_json, levels_csv,
                   lookup_batch, tree_stats)

log = logging.getLogger("cutlearn")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2, 3
WORKERS_ENV = "CUTLEARN_WORKERS"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_rules(path) -> RuleSet:
    rs = load_classbench(path)
    if len(rs) == 0:
        raise ValueError(f"{path}: no rules")
    return rs


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, config: dict, inputs: dict, seed, outputs: list,
                   started: str):
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs,
        "seed": seed,
        "outputs": sorted(outputs),
        "started": started,
        "finished": _now(),
    }
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write(out: Path, name: str, text: str, written: list):
    (out / name).write_text(text)
    written.append(name)


def _print_stats(label: str, st: StatsReport):
    print(f"{label}: time={st.time} bytes/rule={st.bytes_per_rule:.2f} nodes={st.nodes} "
          f"replication={st.replication:.2f} trees={st.num_trees}")


def _export_forest(out: Path, trees, extra: dict, written: list) -> StatsReport:
    st = tree_stats(trees)
    _write(out, "tree.json", forest_to_json(trees, extra), written)
    _write(out, "tree.dot", forest_to_dot(trees), written)
    _write(out, "levels.csv", levels_csv(st), written)
    # exported stats must survive a round trip through the JSON
    back = tree_stats(forest_from_json((out / "tree.json").read_text(), trees[0].ruleset))
    if back.summary() != st.summary():
        raise InvariantError("stats recomputed from the exported JSON differ")
    return st


# --------------------------------------------------------------------------
# commands

def cmd_validate(args) -> int:
    rs = _load_rules(args.rules)
    n = len(rs)
    full = np.array(DIM_MAX)
    wild = ((rs.lo == 0) & (rs.hi == full)).mean(axis=0)
    match_all = sum(r.is_match_all() for r in rs)
    seen, dups = set(), 0
    for r in rs:
        dups += r.ranges in seen
        seen.add(r.ranges)
    print(f"{n} rules, {match_all} match-all")
    print(f"duplicates: {dups}")
    for name, w in zip(DIM_NAMES, wild):
        print(f"  {name:9s} wildcard {w:6.1%}")
    return EXIT_OK


def cmd_build(args) -> int:
    started = _now()
    rs = _load_rules(args.rules)
    params = HiCutsParams(spfac=args.spfac, max_cuts_per_node=args.max_cuts, binth=args.binth)
    if args.builder == "hicuts":
        trees = [build_hicuts(rs, params)]
    else:
        trees = build_efficuts_baseline(rs, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    config = {"builder": args.builder, **asdict(params)}
    st = _export_forest(out, trees, {"builder": args.builder}, written)
    _print_stats(args.builder, st)
    write_manifest(out, "build", config, {"rules": str(args.rules), "rules_sha256": _file_sha256(args.rules)},
                   None, written, started)
    return EXIT_OK


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1")
    return n


def cmd_train(args) -> int:
    started = _now()
    rs = _load_rules(args.rules)
    if args.c < 1 and args.reward_scale == "linear":
        warnings.warn("c < 1 with linear scaling mixes depth and bytes on very different scales; "
                      "--reward-scale log is usually the better choice", stacklevel=1)
    try:
        env = EnvConfig(c=args.c, reward_scale=args.reward_scale, max_actions=args.max_rollout_len,
                        max_depth=args.max_depth, binth=args.binth, partition=args.partition)
        workers = args.workers if args.workers is not None else default_workers()
        cfg = TrainConfig(lr=args.lr, sgd_iters=args.sgd_iters, minibatch=args.minibatch, batch=args.batch,
                          total_timesteps=args.timesteps, max_rollouts=args.max_rollouts,
                          workers=workers, seed=args.seed, hidden=tuple(args.hidden))
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if not args.quiet:
            print(f"iter {row['iteration']:4d} steps {row['timesteps']:9d} rollouts {row['rollouts']:5d} "
                  f"reward {row['mean_reward']:9.3f} best_time {row['best_time']} "
                  f"entropy {row['entropy']:.3f} kl {row['kl']:.4f}", flush=True)

    report = train(rs, env, cfg, progress=progress)
    written = []
    st = _export_forest(out, [report.best_tree], {"builder": "learned", "truncated": report.best_key[0]},
                        written)
    _write(out, "train.csv", report.to_csv(), written)
    report.save_checkpoint(out / "checkpoint.npz")
    written.append("checkpoint.npz")
    _print_stats("learned" + (" (truncated)" if report.best_key[0] else ""), st)
    config = {"env": asdict(env), "train": {**asdict(cfg), "hidden": list(cfg.hidden)}}
    write_manifest(out, "train", config, {"rules": str(args.rules), "rules_sha256": _file_sha256(args.rules)},
                   args.seed, written, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.packets < 1:
        raise UsageError("--packets must be >= 1")
    rs = _load_rules(args.rules)
    try:
        trees = forest_from_json(Path(args.tree).read_text(), rs)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    pkts = sample_packets(rs, args.packets, args.seed)
    got = lookup_batch(trees, pkts)
    want = linear_match_batch(rs, pkts)
    bad = int((got != want).sum())
    _print_stats("tree", tree_stats(trees))
    print(f"packets={args.packets} mismatches={bad}")
    if bad:
        i = int(np.flatnonzero(got != want)[0])
        print(f"first mismatch: packet {pkts[i].tolist()} tree={got[i]} linear={want[i]}")
        return EXIT_INVARIANT
    return EXIT_OK


COMPARE_FIELDS = ("name", "time", "bytes_per_rule", "nodes", "replication",
                  "time_delta_pct", "bytes_delta_pct", "nodes_delta_pct", "replication_delta_pct")


def _pct(v, base):
    if base == 0:
        return 0.0 if v == 0 else float("inf")
    return 100.0 * (v - base) / base


def compare_rows(entries) -> list:
    """``entries`` is [(name, StatsReport)]; deltas are relative to the first."""
    base = entries[0][1]
    rows = []
    for name, st in entries:
        rows.append({
            "name": name, "time": st.time, "bytes_per_rule": round(st.bytes_per_rule, 4),
            "nodes": st.nodes, "replication": round(st.replication, 4),
            "time_delta_pct": round(_pct(st.time, base.time), 2),
            "bytes_delta_pct": round(_pct(st.bytes_per_rule, base.bytes_per_rule), 2),
            "nodes_delta_pct": round(_pct(st.nodes, base.nodes), 2),
            "replication_delta_pct": round(_pct(st.replication, base.replication), 2),
        })
    return rows


def compare_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARE_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_compare(args) -> int:
    rs = _load_rules(args.rules)
    entries = []
    for path in args.trees:
        try:
            trees = forest_from_json(Path(path).read_text(), rs)
        except ValueError as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            return EXIT_INVALID
        entries.append((str(path), tree_stats(trees)))
    rows = compare_rows(entries)
    width = max(len(r["name"]) for r in rows)
    print(f"{'tree':{width}s}  {'time':>5s} {'B/rule':>10s} {'nodes':>8s} {'repl':>7s}  "
          f"{'dtime%':>8s} {'dB/rule%':>9s}")
    for r in rows:
        print(f"{r['name']:{width}s}  {r['time']:5d} {r['bytes_per_rule']:10.2f} {r['nodes']:8d} "
              f"{r['replication']:7.2f}  {r['time_delta_pct']:8.2f} {r['bytes_delta_pct']:9.2f}")
    if args.csv:
        Path(args.csv).write_text(compare_csv(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cutlearn", description="Packet-classification decision trees: baselines and RL.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="parse a ClassBench rule file and summarise it")
    v.add_argument("rules")
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("build", help="build a baseline tree")
    b.add_argument("rules")
    b.add_argument("--builder", choices=("hicuts", "efficuts"), default="hicuts")
    b.add_argument("--binth", type=int, default=16)
    b.add_argument("--spfac", type=float, default=1.0)
    b.add_argument("--max-cuts", type=int, default=32)
    b.add_argument("--out", default="out/build")
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="train a tree-building policy")
    t.add_argument("rules")
    t.add_argument("--c", type=float, default=1.0, help="time-space coefficient in [0, 1]")
    t.add_argument("--reward-scale", choices=("linear", "log"), default="linear")
    t.add_argument("--partition", choices=PARTITION_MODES, default="none")
    t.add_argument("--max-rollout-len", type=int, default=15000)
    t.add_argument("--max-depth", type=int, default=100)
    t.add_argument("--binth", type=int, default=16)
    t.add_argument("--workers", type=int, default=None, help=f"default: ${WORKERS_ENV} or 1")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--timesteps", type=int, default=10_000_000)
    t.add_argument("--max-rollouts", type=int, default=None)
    t.add_argument("--batch", type=int, default=60000)
    t.add_argument("--minibatch", type=int, default=1000)
    t.add_argument("--sgd-iters", type=int, default=30)
    t.add_argument("--lr", type=float, default=5e-5)
    t.add_argument("--hidden", type=int, nargs=2, default=(512, 512), metavar=("H1", "H2"))
    t.add_argument("--out", default="out/train")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="check a tree export against linear search")
    e.add_argument("tree")
    e.add_argument("rules")
    e.add_argument("--packets", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="side-by-side stats of tree exports")
    c.add_argument("rules")
    c.add_argument("trees", nargs="+")
    c.add_argument("--csv", default=None, help="also write the table as CSV")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantError as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
