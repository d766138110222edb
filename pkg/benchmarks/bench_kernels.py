"""Compare the jitted and pure-numpy paths of the hot kernels.

Run directly:  python3 benchmarks/bench_kernels.py
The numba path is what WFLOW_NUMBA=1 (default) selects at import time;
here both implementations are timed side by side in one process.
"""

import time

import numpy as np

from wflow import _kernels
from wflow.metrics import sq_dists


def timeit(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_assignment():
    rng = np.random.default_rng(0)
    print("assignment solver (square cost matrix)")
    print(f"{'m':>6} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for m in (64, 128, 256, 512):
        cost = sq_dists(rng.normal(size=(m, 2)), rng.normal(size=(m, 2)) + 1.0)
        if _kernels.NUMBA_ENABLED:
            _kernels._assignment_jit(cost)  # compile outside the timer
            t_jit = timeit(lambda: _kernels._assignment_jit(cost))
        else:
            t_jit = float("nan")
        t_np = timeit(lambda: _kernels._assignment_numpy(cost))
        print(f"{m:>6} {t_jit:>9.4f}s {t_np:>9.4f}s {t_np / t_jit:>7.1f}x")


def bench_mmd_permutations():
    rng = np.random.default_rng(1)
    print("\nmmd^2 permutation null (200 permutations)")
    print(f"{'n':>6} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for n in (100, 200, 400):
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2)) + 0.3
        joint = np.concatenate([a, b])
        K = np.exp(-sq_dists(joint, joint))
        perms = np.stack([rng.permutation(2 * n) for _ in range(200)]).astype(np.int64)
        out = np.empty(200)
        if _kernels.NUMBA_ENABLED:
            _kernels._mmd2_perm_jit(K, n, perms, out)
            t_jit = timeit(lambda: _kernels._mmd2_perm_jit(K, n, perms, out))
        else:
            t_jit = float("nan")
        t_np = timeit(lambda: _kernels._mmd2_perm_numpy(K, n, perms, out))
        print(f"{2 * n:>6} {t_jit:>9.4f}s {t_np:>9.4f}s {t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    print(f"numba path available: {_kernels.NUMBA_ENABLED}\n")
    bench_assignment()
    bench_mmd_permutations()
