"""Hot numeric kernels with numba and pure-numpy implementations.

Two inner loops dominate runtime: the per-combo pipeline-placement search that
library generation runs tens of thousands of times, and the dense-simplex
iterations inside the built-in MILP solver.  Both are provided as numba
``@njit`` kernels with pure-numpy fallbacks; set ``HETSERVE_NUMBA=0`` to force
the fallback path.  ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("HETSERVE_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

if _want_numba:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA

NEG_INF = -1e300


# ---------------------------------------------------------------------------
# placement search kernel
#
# Maximize, over ordered stage layer counts j_1..j_S (each >= 1, summing to L)
# and a partition of the node multiset into S non-empty groups, the minimum
# over stages of sum(tput[c, j_s] for nodes c in the group).  `tput[c, j-1]`
# is the per-node throughput when holding j layers.  Node multisets are
# encoded in mixed radix over per-config counts, so group arithmetic is plain
# integer subtraction.
#
# When tput is non-increasing in j (the roofline model guarantees this), the
# inner maximization over j of min(group value, future value) is a crossing of
# a non-increasing and a non-decreasing step function and is found by binary
# search; otherwise a full scan over j is used.
# ---------------------------------------------------------------------------


def _placement_tables(counts: np.ndarray, tput: np.ndarray):
    """Shared precomputation: radix strides, sizes, and group-value table."""
    C = counts.shape[0]
    L = tput.shape[1]
    strides = np.ones(C, dtype=np.int64)
    for c in range(1, C):
        strides[c] = strides[c - 1] * (counts[c - 1] + 1)
    M = int(strides[C - 1] * (counts[C - 1] + 1))

    digits = np.zeros((M, C), dtype=np.int64)
    for code in range(M):
        rest = code
        for c in range(C):
            digits[code, c] = rest % (counts[c] + 1)
            rest //= counts[c] + 1
    sizes = digits.sum(axis=1)

    # value[code, j] = total group throughput at j layers (index j, col 0 unused)
    value = np.zeros((M, L + 1))
    value[:, 1:] = digits @ tput
    return strides, M, digits, sizes, value


def _placement_dp_py(counts, tput, S, monotone):
    """Pure-numpy placement search (full scan over layer counts)."""
    C = counts.shape[0]
    L = tput.shape[1]
    _, M, digits, sizes, value = _placement_tables(counts, tput)
    full = M - 1

    if S > int(sizes[full]) or S > L:
        return NEG_INF, np.zeros(S, dtype=np.int64), np.zeros((S, C), dtype=np.int64)

    f = np.full((S + 1, L + 1, M), NEG_INF)
    ch_u = np.zeros((S + 1, L + 1, M), dtype=np.int64)
    ch_j = np.zeros((S + 1, L + 1, M), dtype=np.int64)

    f[1, 1:, 1:] = value[1:, 1:].T  # last stage takes everything that remains

    for sg in range(2, S + 1):
        fprev = f[sg - 1]
        for rem in range(1, M):
            if sizes[rem] < sg:
                continue
            subs = [u for u in range(1, rem + 1)
                    if np.all(digits[u] <= digits[rem]) and sizes[rem] - sizes[u] >= sg - 1]
            if not subs:
                continue
            for l in range(sg, L + 1):
                jmax = l - (sg - 1)
                best = NEG_INF
                bu = 0
                bj = 0
                for u in subs:
                    g = value[u, 1:jmax + 1]
                    h = fprev[l - jmax:l, rem - u][::-1]
                    vals = np.minimum(g, h)
                    idx = int(np.argmax(vals))
                    if vals[idx] > best:
                        best = vals[idx]
                        bu = u
                        bj = idx + 1
                f[sg, l, rem] = best
                ch_u[sg, l, rem] = bu
                ch_j[sg, l, rem] = bj

    return _placement_decode(f, ch_u, ch_j, digits, S, L, full, C)


def _placement_decode(f, ch_u, ch_j, digits, S, L, full, C):
    best = f[S, L, full]
    stage_j = np.zeros(S, dtype=np.int64)
    stage_counts = np.zeros((S, C), dtype=np.int64)
    if best <= NEG_INF / 2:
        return NEG_INF, stage_j, stage_counts
    l, rem = L, full
    for s in range(S):
        sg = S - s
        if sg == 1:
            u, j = rem, l
        else:
            u = int(ch_u[sg, l, rem])
            j = int(ch_j[sg, l, rem])
        stage_j[s] = j
        stage_counts[s] = digits[u]
        l -= j
        rem -= u
    return float(best), stage_j, stage_counts


if USE_NUMBA:

    @njit(cache=True)
    def _placement_dp_nb(counts, tput, S, monotone):  # pragma: no cover - jitted
        C = counts.shape[0]
        L = tput.shape[1]
        M = 1
        for c in range(C):
            M *= counts[c] + 1
        full = M - 1

        digits = np.zeros((M, C), dtype=np.int64)
        sizes = np.zeros(M, dtype=np.int64)
        for code in range(M):
            rest = code
            tot = 0
            for c in range(C):
                d = rest % (counts[c] + 1)
                digits[code, c] = d
                tot += d
                rest //= counts[c] + 1
            sizes[code] = tot

        value = np.zeros((M, L + 1))
        for code in range(M):
            for j in range(1, L + 1):
                v = 0.0
                for c in range(C):
                    v += digits[code, c] * tput[c, j - 1]
                value[code, j] = v

        stage_j = np.zeros(S, dtype=np.int64)
        stage_counts = np.zeros((S, C), dtype=np.int64)
        if S > sizes[full] or S > L:
            return NEG_INF, stage_j, stage_counts

        f = np.full((S + 1, L + 1, M), NEG_INF)
        ch_u = np.zeros((S + 1, L + 1, M), dtype=np.int64)
        ch_j = np.zeros((S + 1, L + 1, M), dtype=np.int64)

        for rem in range(1, M):
            for l in range(1, L + 1):
                f[1, l, rem] = value[rem, l]

        contains = np.zeros((M, M), dtype=np.bool_)
        for rem in range(M):
            for u in range(1, rem + 1):
                ok = True
                for c in range(C):
                    if digits[u, c] > digits[rem, c]:
                        ok = False
                        break
                contains[rem, u] = ok

        for sg in range(2, S + 1):
            for rem in range(1, M):
                if sizes[rem] < sg:
                    continue
                for l in range(sg, L + 1):
                    jmax = l - (sg - 1)
                    best = NEG_INF
                    bu = 0
                    bj = 0
                    for u in range(1, rem + 1):
                        if not contains[rem, u]:
                            continue
                        if sizes[rem] - sizes[u] < sg - 1:
                            continue
                        rem2 = rem - u
                        if monotone:
                            # g(j)=value[u,j] non-increasing, h(j)=f[sg-1,l-j,rem2]
                            # non-decreasing: optimum sits at their crossing.
                            g1 = value[u, 1]
                            h1 = f[sg - 1, l - 1, rem2]
                            gm = value[u, jmax]
                            hm = f[sg - 1, l - jmax, rem2]
                            if g1 <= h1:
                                cand = g1
                                cj = 1
                            elif gm >= hm:
                                cand = hm
                                cj = jmax
                            else:
                                lo = 1
                                hi = jmax
                                while hi - lo > 1:
                                    mid = (lo + hi) // 2
                                    if value[u, mid] > f[sg - 1, l - mid, rem2]:
                                        lo = mid
                                    else:
                                        hi = mid
                                vlo = f[sg - 1, l - lo, rem2]
                                vhi = value[u, hi]
                                if vlo >= vhi:
                                    cand = vlo
                                    cj = lo
                                else:
                                    cand = vhi
                                    cj = hi
                        else:
                            cand = NEG_INF
                            cj = 0
                            for j in range(1, jmax + 1):
                                v = value[u, j]
                                h = f[sg - 1, l - j, rem2]
                                mv = v if v < h else h
                                if mv > cand:
                                    cand = mv
                                    cj = j
                        if cand > best:
                            best = cand
                            bu = u
                            bj = cj
                    f[sg, l, rem] = best
                    ch_u[sg, l, rem] = bu
                    ch_j[sg, l, rem] = bj

        best = f[S, L, full]
        if best <= NEG_INF / 2:
            return NEG_INF, stage_j, stage_counts
        l = L
        rem = full
        for s in range(S):
            sg = S - s
            if sg == 1:
                u = rem
                j = l
            else:
                u = ch_u[sg, l, rem]
                j = ch_j[sg, l, rem]
            stage_j[s] = j
            for c in range(C):
                stage_counts[s, c] = digits[u, c]
            l -= j
            rem -= u
        return best, stage_j, stage_counts


def placement_search(counts: np.ndarray, tput: np.ndarray, S: int):
    """Best max-min pipeline layout for one node combo at a fixed stage count.

    counts: per-config node counts (len C); tput: (C, L) per-node throughput
    by layer count.  Returns (objective, stage_layers[S], stage_counts[S, C]);
    objective is ``NEG_INF`` when no assignment exists (more stages than nodes
    or layers).
    """
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    tput = np.ascontiguousarray(tput, dtype=np.float64)
    if np.any(tput < 0):
        raise ValueError("throughput table must be non-negative")
    monotone = bool(np.all(np.diff(tput, axis=1) <= 1e-12)) if tput.shape[1] > 1 else True
    if USE_NUMBA:
        best, sj, sc = _placement_dp_nb(counts, tput, S, monotone)
        return float(best), sj, sc
    return _placement_dp_py(counts, tput, S, monotone)


# ---------------------------------------------------------------------------
# dense simplex core (Bland's rule)
#
# Operates on a standard-form tableau T of shape (m+1, n+1): rows 0..m-1 hold
# A|b, the last row holds reduced costs and -objective.  `basis[i]` is the
# variable occupying row i.  Returns 0 (optimal) or 1 (unbounded).
# ---------------------------------------------------------------------------

SIMPLEX_TOL = 1e-9


def _simplex_core_py(T: np.ndarray, basis: np.ndarray, max_iter: int) -> int:
    m = T.shape[0] - 1
    ncols = T.shape[1] - 1
    for _ in range(max_iter):
        costs = T[m, :ncols]
        neg = np.nonzero(costs < -SIMPLEX_TOL)[0]
        if neg.size == 0:
            return 0
        e = int(neg[0])  # Bland: smallest index
        col = T[:m, e]
        pos = np.nonzero(col > SIMPLEX_TOL)[0]
        if pos.size == 0:
            return 1
        ratios = T[pos, ncols] / col[pos]
        rmin = ratios.min()
        ties = pos[np.nonzero(ratios <= rmin + SIMPLEX_TOL)[0]]
        r = int(ties[np.argmin(basis[ties])])  # Bland: smallest basis var
        piv = T[r, e]
        T[r, :] /= piv
        factors = T[:, e].copy()
        factors[r] = 0.0
        T -= np.outer(factors, T[r, :])
        basis[r] = e
    return 2  # iteration cap hit (should not happen with Bland's rule)


if USE_NUMBA:

    @njit(cache=True)
    def _simplex_core_nb(T, basis, max_iter):  # pragma: no cover - jitted
        m = T.shape[0] - 1
        ncols = T.shape[1] - 1
        for _ in range(max_iter):
            e = -1
            for jcol in range(ncols):
                if T[m, jcol] < -SIMPLEX_TOL:
                    e = jcol
                    break
            if e < 0:
                return 0
            best_ratio = 1e300
            for i in range(m):
                if T[i, e] > SIMPLEX_TOL:
                    ratio = T[i, ncols] / T[i, e]
                    if ratio < best_ratio:
                        best_ratio = ratio
            if best_ratio >= 1e300:
                return 1
            r = -1
            for i in range(m):
                if T[i, e] > SIMPLEX_TOL:
                    ratio = T[i, ncols] / T[i, e]
                    if ratio <= best_ratio + SIMPLEX_TOL and (r < 0 or basis[i] < basis[r]):
                        r = i
            piv = T[r, e]
            for jcol in range(ncols + 1):
                T[r, jcol] /= piv
            for i in range(m + 1):
                if i == r:
                    continue
                fac = T[i, e]
                if fac != 0.0:
                    for jcol in range(ncols + 1):
                        T[i, jcol] -= fac * T[r, jcol]
            basis[r] = e
        return 2


def simplex_core(T: np.ndarray, basis: np.ndarray, max_iter: int = 100000) -> int:
    """Run simplex pivots to optimality; mutates T and basis in place."""
    if USE_NUMBA:
        return int(_simplex_core_nb(T, basis, max_iter))
    return _simplex_core_py(T, basis, max_iter)
