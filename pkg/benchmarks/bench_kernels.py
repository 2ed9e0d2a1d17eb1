#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each hot kernel on representative workloads with both implementations
(numba is exercised in-process, the fallback via the module's private
reference functions) and prints a small table.  The same comparison can be
reproduced end-to-end by rerunning under HETSERVE_NUMBA=0.
"""

import time

import numpy as np

from hetserve import kernels as K


def bench(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def placement_cases():
    rng = np.random.default_rng(0)
    cases = []
    for counts, L, S, label in [
        (np.array([2, 2], dtype=np.int64), 32, 3, "small  (4 nodes, L=32, S=3)"),
        (np.array([3, 3], dtype=np.int64), 64, 4, "medium (6 nodes, L=64, S=4)"),
        (np.array([1, 1, 1, 1, 1, 1], dtype=np.int64), 64, 5,
         "large  (6 distinct, L=64, S=5)"),
    ]:
        tput = np.sort(rng.uniform(0, 1000, size=(len(counts), L)), axis=1)[:, ::-1]
        cases.append((label, counts, np.ascontiguousarray(tput), S))
    return cases


def simplex_case(m, n, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 3, size=(m, n))
    b = rng.uniform(1, 5, size=m)
    c = rng.uniform(-2, 2, size=n)
    total = n + m
    T = np.zeros((m + 1, total + 1))
    T[:m, :n] = A
    T[:m, n:total] = np.eye(m)
    T[:m, total] = b
    T[m, :n] = c
    basis = np.arange(n, n + m, dtype=np.int64)
    return T, basis


def main():
    print(f"numba available and enabled: {K.USE_NUMBA}")
    print()
    print(f"{'placement search':<34} {'numpy (s)':>12} {'numba (s)':>12} {'speedup':>9}")
    for label, counts, tput, S in placement_cases():
        t_np = bench(K._placement_dp_py, counts, tput, S, True)
        if K.USE_NUMBA:
            t_nb = bench(K._placement_dp_nb, counts, tput, S, True)
            a, _, _ = K._placement_dp_py(counts, tput, S, True)
            b, _, _ = K._placement_dp_nb(counts, tput, S, True)
            assert abs(a - b) < 1e-9, "paths disagree"
            print(f"{label:<34} {t_np:12.5f} {t_nb:12.5f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{label:<34} {t_np:12.5f} {'-':>12} {'-':>9}")
    print()
    print(f"{'dense simplex':<34} {'numpy (s)':>12} {'numba (s)':>12} {'speedup':>9}")
    for m, n in [(40, 60), (120, 180), (250, 350)]:
        label = f"LP {m}x{n}"
        T1, b1 = simplex_case(m, n, 1)
        t_np = bench(lambda: K._simplex_core_py(T1.copy(), b1.copy(), 100000))
        if K.USE_NUMBA:
            t_nb = bench(lambda: K._simplex_core_nb(T1.copy(), b1.copy(), 100000))
            Ta, ba = T1.copy(), b1.copy()
            Tb, bb = T1.copy(), b1.copy()
            K._simplex_core_py(Ta, ba, 100000)
            K._simplex_core_nb(Tb, bb, 100000)
            assert abs(Ta[m, -1] - Tb[m, -1]) < 1e-8, "paths disagree"
            print(f"{label:<34} {t_np:12.5f} {t_nb:12.5f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{label:<34} {t_np:12.5f} {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()
