"""Compare the numba-compiled hot kernels against the pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
Both code paths produce bit-identical outputs; this script verifies that on
the benchmark inputs and reports wall-clock times and speedups.
"""

import time

import numpy as np

from mmreid import kernels


def timeit(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - start)
    return best, out


def bench(name, nb_fn, np_fn, *args):
    nb_fn(*args)  # trigger JIT compilation outside the timed region
    t_nb, out_nb = timeit(nb_fn, *args)
    t_np, out_np = timeit(np_fn, *args)
    if isinstance(out_nb, tuple):
        identical = all(np.array_equal(a, b) for a, b in zip(out_nb, out_np))
    else:
        identical = np.array_equal(out_nb, out_np)
    print(f"{name:<22} numba {t_nb * 1e3:8.2f} ms   numpy {t_np * 1e3:8.2f} ms"
          f"   speedup {t_np / t_nb:6.1f}x   bit-identical: {identical}")
    if not identical:
        raise SystemExit(f"{name}: paths disagree")


def main():
    if not kernels.NUMBA_ENABLED:
        raise SystemExit("numba is disabled (MMREID_DISABLE_NUMBA set or not "
                         "installed); nothing to compare")
    rng = np.random.default_rng(0)

    probs = rng.random((200_000, 8))
    probs /= probs.sum(axis=1, keepdims=True)
    bench("adaptive_mask", kernels._adaptive_mask_nb, kernels.adaptive_mask_numpy,
          probs, 0.6)
    bench("topk_mask", kernels._topk_mask_nb, kernels.topk_mask_numpy, probs, 2)

    matches = rng.random((5_000, 500)) < 0.05
    matches[:, 0] = True  # every query needs at least one relevant item
    bench("ranking_stats", kernels._ranking_stats_nb, kernels.ranking_stats_numpy,
          matches)


if __name__ == "__main__":
    main()
