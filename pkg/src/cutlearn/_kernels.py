"""Hot loops with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``CUTLEARN_DISABLE_NUMBA`` is unset (or set to ``0``). Both paths
are always importable so tests and the benchmark can compare them.
"""

import os

import numpy as np

_DISABLE = os.environ.get("CUTLEARN_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("disabled by CUTLEARN_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA

# Pairs processed per chunk by the numpy paths; bounds temporary memory.
_CHUNK_CELLS = 1 << 22


# --------------------------------------------------------------------------
# near-equal interval splitting

def child_index_np(values, lo, hi, k):
    """Index of the near-equal piece of ``[lo, hi]`` holding each value.

    The first ``(hi - lo + 1) % k`` pieces are one unit wider.
    """
    values = np.asarray(values, dtype=np.int64)
    width = hi - lo + 1
    q, r = divmod(width, k)
    off = values - lo
    big = r * (q + 1)
    if q == 0:
        return off
    return np.where(off < big, off // (q + 1), r + (off - big) // q)


def cut_assign_np(rlo, rhi, lo, hi, k):
    """First and last child touched by each rule interval (clipped to the node)."""
    first = child_index_np(np.maximum(rlo, lo), lo, hi, k)
    last = child_index_np(np.minimum(rhi, hi), lo, hi, k)
    return first, last


def cut_children_np(rlo, rhi, rules, lo, hi, k):
    """CSR (ptr, flat) of the rules landing in each of the ``k`` cut children."""
    first, last = cut_assign_np(rlo, rhi, lo, hi, k)
    span = last - first + 1
    total = int(span.sum())
    child = np.repeat(first, span) + (np.arange(total) - np.repeat(np.cumsum(span) - span, span))
    order = np.argsort(child, kind="stable")
    flat = np.repeat(rules, span)[order]
    ptr = np.zeros(k + 1, dtype=np.int64)
    np.cumsum(np.bincount(child, minlength=k), out=ptr[1:])
    return ptr, flat


def covers_np(rlo, rhi, ptr, flat, reg_lo, reg_hi):
    """(m, d) mask: every rule of segment i spans region i in dimension j.

    Empty segments report True.
    """
    m = ptr.size - 1
    out = np.ones((m, rlo.shape[1]), dtype=bool)
    counts = np.diff(ptr)
    live = counts > 0
    if live.any():
        starts = ptr[:-1][live]
        mx = np.maximum.reduceat(rlo[flat], starts, axis=0)
        mn = np.minimum.reduceat(rhi[flat], starts, axis=0)
        out[live] = (mx <= reg_lo[live]) & (mn >= reg_hi[live])
    return out


def first_match_np(rule_lo, rule_hi, packets):
    """Lowest rule index matching each packet, -1 when none does."""
    packets = np.asarray(packets, dtype=np.int64)
    n = rule_lo.shape[0]
    out = np.full(packets.shape[0], -1, dtype=np.int64)
    if n == 0 or packets.shape[0] == 0:
        return out
    step = max(1, _CHUNK_CELLS // (n * rule_lo.shape[1]))
    for s in range(0, packets.shape[0], step):
        p = packets[s:s + step, None, :]
        hit = ((rule_lo[None] <= p) & (p <= rule_hi[None])).all(axis=2)
        any_hit = hit.any(axis=1)
        out[s:s + step] = np.where(any_hit, hit.argmax(axis=1), -1)
    return out


def forest_lookup_np(flat, packets):
    """Frontier-at-a-time walk of a flattened forest (see ``tree.flatten_forest``)."""
    kind, nlo, nhi, cptr, cidx, rptr, ridx, roots, rule_lo, rule_hi = flat
    packets = np.asarray(packets, dtype=np.int64)
    m = packets.shape[0]
    big = np.iinfo(np.int64).max
    best = np.full(m, big, dtype=np.int64)
    pk = np.repeat(np.arange(m, dtype=np.int64), roots.size)
    nd = np.tile(roots.astype(np.int64), m)
    while pk.size:
        p = packets[pk]
        inside = ((nlo[nd] <= p) & (p <= nhi[nd])).all(axis=1)
        pk, nd, p = pk[inside], nd[inside], p[inside]
        leaf = kind[nd] == 0
        if leaf.any():
            lp, ln, lpk = p[leaf], nd[leaf], pk[leaf]
            start = rptr[ln]
            count = rptr[ln + 1] - start
            for j in range(int(count.max(initial=0))):
                live = count > j
                if not live.any():
                    break
                r = ridx[np.where(live, start + j, 0)]
                hit = live & ((rule_lo[r] <= lp) & (lp <= rule_hi[r])).all(axis=1)
                np.minimum.at(best, lpk[hit], r[hit])
        pk, nd = pk[~leaf], nd[~leaf]
        if not pk.size:
            break
        start = cptr[nd]
        count = cptr[nd + 1] - start
        total = int(count.sum())
        rep_pk = np.repeat(pk, count)
        offs = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
        nd = cidx[np.repeat(start, count) + offs]
        pk = rep_pk
    return np.where(best == big, -1, best)


# --------------------------------------------------------------------------
# numba versions

if HAVE_NUMBA:

    @njit(cache=True)
    def _child_index_scalar(v, lo, hi, k):
        width = hi - lo + 1
        q = width // k
        r = width - q * k
        off = v - lo
        if q == 0:
            return off
        big = r * (q + 1)
        if off < big:
            return off // (q + 1)
        return r + (off - big) // q

    @njit(cache=True)
    def cut_assign_nb(rlo, rhi, lo, hi, k):
        n = rlo.shape[0]
        first = np.empty(n, dtype=np.int64)
        last = np.empty(n, dtype=np.int64)
        for i in range(n):
            a = rlo[i] if rlo[i] > lo else lo
            b = rhi[i] if rhi[i] < hi else hi
            first[i] = _child_index_scalar(a, lo, hi, k)
            last[i] = _child_index_scalar(b, lo, hi, k)
        return first, last

    @njit(cache=True)
    def cut_children_nb(rlo, rhi, rules, lo, hi, k):
        first, last = cut_assign_nb(rlo, rhi, lo, hi, k)
        ptr = np.zeros(k + 1, dtype=np.int64)
        for i in range(first.shape[0]):
            for j in range(first[i], last[i] + 1):
                ptr[j + 1] += 1
        for j in range(k):
            ptr[j + 1] += ptr[j]
        fill = ptr[:-1].copy()
        flat = np.empty(ptr[k], dtype=np.int64)
        for i in range(first.shape[0]):
            for j in range(first[i], last[i] + 1):
                flat[fill[j]] = rules[i]
                fill[j] += 1
        return ptr, flat

    @njit(cache=True)
    def covers_nb(rlo, rhi, ptr, flat, reg_lo, reg_hi):
        m = ptr.shape[0] - 1
        d = rlo.shape[1]
        out = np.ones((m, d), dtype=np.bool_)
        for i in range(m):
            for q in range(ptr[i], ptr[i + 1]):
                r = flat[q]
                for j in range(d):
                    if rlo[r, j] > reg_lo[i, j] or rhi[r, j] < reg_hi[i, j]:
                        out[i, j] = False
        return out

    @njit(cache=True)
    def first_match_nb(rule_lo, rule_hi, packets):
        m = packets.shape[0]
        n = rule_lo.shape[0]
        d = rule_lo.shape[1]
        out = np.full(m, -1, dtype=np.int64)
        for i in range(m):
            for r in range(n):
                ok = True
                for j in range(d):
                    v = packets[i, j]
                    if v < rule_lo[r, j] or v > rule_hi[r, j]:
                        ok = False
                        break
                if ok:
                    out[i] = r
                    break
        return out

    @njit(cache=True)
    def _forest_lookup_nb(kind, nlo, nhi, cptr, cidx, rptr, ridx, roots, rule_lo, rule_hi, packets):
        m = packets.shape[0]
        d = packets.shape[1]
        out = np.full(m, -1, dtype=np.int64)
        stack = np.empty(max(1, cidx.shape[0] + roots.shape[0]), dtype=np.int64)
        for i in range(m):
            best = -1
            top = 0
            for t in range(roots.shape[0]):
                stack[top] = roots[t]
                top += 1
            while top > 0:
                top -= 1
                nd = stack[top]
                inside = True
                for j in range(d):
                    v = packets[i, j]
                    if v < nlo[nd, j] or v > nhi[nd, j]:
                        inside = False
                        break
                if not inside:
                    continue
                if kind[nd] == 0:
                    for q in range(rptr[nd], rptr[nd + 1]):
                        r = ridx[q]
                        if best != -1 and r >= best:
                            break
                        ok = True
                        for j in range(d):
                            v = packets[i, j]
                            if v < rule_lo[r, j] or v > rule_hi[r, j]:
                                ok = False
                                break
                        if ok:
                            best = r
                            break
                else:
                    for q in range(cptr[nd + 1] - 1, cptr[nd] - 1, -1):
                        stack[top] = cidx[q]
                        top += 1
            out[i] = best
        return out

    def forest_lookup_nb(flat, packets):
        return _forest_lookup_nb(*flat, np.ascontiguousarray(packets, dtype=np.int64))


# --------------------------------------------------------------------------
# dispatch

def cut_assign(rlo, rhi, lo, hi, k):
    if USE_NUMBA:
        return cut_assign_nb(rlo, rhi, np.int64(lo), np.int64(hi), np.int64(k))
    return cut_assign_np(rlo, rhi, lo, hi, k)


def cut_children(rule_lo, rule_hi, rules, dim, lo, hi, k):
    """Split ``rules`` (ascending) over ``k`` near-equal pieces of ``[lo, hi]`` in ``dim``."""
    rlo = np.ascontiguousarray(rule_lo[rules, dim])
    rhi = np.ascontiguousarray(rule_hi[rules, dim])
    if USE_NUMBA:
        return cut_children_nb(rlo, rhi, rules, np.int64(lo), np.int64(hi), np.int64(k))
    return cut_children_np(rlo, rhi, rules, lo, hi, k)


def covers(rule_lo, rule_hi, ptr, flat, reg_lo, reg_hi):
    if USE_NUMBA:
        return covers_nb(rule_lo, rule_hi, ptr, flat, reg_lo, reg_hi)
    return covers_np(rule_lo, rule_hi, ptr, flat, reg_lo, reg_hi)


def first_match(rule_lo, rule_hi, packets):
    packets = np.ascontiguousarray(packets, dtype=np.int64)
    if USE_NUMBA:
        return first_match_nb(rule_lo, rule_hi, packets)
    return first_match_np(rule_lo, rule_hi, packets)


def forest_lookup(flat, packets):
    if USE_NUMBA:
        return forest_lookup_nb(flat, packets)
    return forest_lookup_np(flat, packets)
