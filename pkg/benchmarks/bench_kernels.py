"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--rules 1000] [--packets 100000] [--repeat 5]

Prints one row per kernel with the best-of-N time for each path and the
speedup. Results of both paths are checked for equality first.
"""

import argparse
import timeit

import numpy as np

from cutlearn import _kernels as K
from cutlearn.baselines import build_hicuts
from cutlearn.ruleset import generate_rules, sample_packets
from cutlearn.tree import flatten_forest


def cases(n_rules, n_packets):
    rs = generate_rules(n_rules, 1, "fw")
    pkts = sample_packets(rs, n_packets, 2)
    rlo, rhi = np.ascontiguousarray(rs.lo), np.ascontiguousarray(rs.hi)
    flat = flatten_forest([build_hicuts(rs)])
    rules = np.arange(len(rs), dtype=np.int64)
    dlo, dhi = np.ascontiguousarray(rlo[:, 0]), np.ascontiguousarray(rhi[:, 0])
    k = 32
    ptr, members = K.cut_children_np(dlo, dhi, rules, 0, (1 << 32) - 1, k)
    width = ((1 << 32) - 1) // k
    reg_lo = np.zeros((k, 5), dtype=np.int64)
    reg_hi = np.tile(np.array(rhi.max(axis=0), dtype=np.int64), (k, 1))
    reg_lo[:, 0] = np.arange(k) * width
    reg_hi[:, 0] = reg_lo[:, 0] + width - 1
    return {
        "first_match": (K.first_match_np, K.first_match_nb if K.HAVE_NUMBA else None, (rlo, rhi, pkts)),
        "forest_lookup": (K.forest_lookup_np, K.forest_lookup_nb if K.HAVE_NUMBA else None, (flat, pkts)),
        "cut_children": (K.cut_children_np, K.cut_children_nb if K.HAVE_NUMBA else None,
                         (dlo, dhi, rules, np.int64(0), np.int64((1 << 32) - 1), np.int64(k))),
        "covers": (K.covers_np, K.covers_nb if K.HAVE_NUMBA else None, (rlo, rhi, ptr, members, reg_lo, reg_hi)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rules", type=int, default=1000)
    ap.add_argument("--packets", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba unavailable (or CUTLEARN_DISABLE_NUMBA set): timing the numpy path only")
    print(f"{'kernel':14s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn, fn_args) in cases(args.rules, args.packets).items():
        t_np = min(timeit.repeat(lambda: np_fn(*fn_args), number=1, repeat=args.repeat))
        if nb_fn is None:
            print(f"{name:14s} {t_np * 1e3:10.2f} {'-':>10s} {'-':>8s}")
            continue
        if not same(np_fn(*fn_args), nb_fn(*fn_args)):  # also compiles
            raise SystemExit(f"{name}: numba and numpy results differ")
        t_nb = min(timeit.repeat(lambda: nb_fn(*fn_args), number=1, repeat=args.repeat))
        print(f"{name:14s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
