"""Hot inner-loop kernels: per-token expert selection and per-query ranking.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
Set ``MMREID_DISABLE_NUMBA=1`` to force the numpy path (the benchmark in
``benchmarks/bench_kernels.py`` compares the two). Both paths implement the
identical selection rule, including the lowest-index-first tie break, so
results are bit-identical either way.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_ENABLED = os.environ.get("MMREID_DISABLE_NUMBA", "") not in ("1", "true", "yes")

if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _descending_order(p):
    """Indices of p in descending value order, lower index first on ties."""
    return np.argsort(-p, kind="stable")


# ---------------------------------------------------------------------------
# routing masks: rows of confidence vectors -> 0/1 expert selection masks


def adaptive_mask_numpy(probs: np.ndarray, tau: float) -> np.ndarray:
    """Minimal descending-confidence prefix reaching cumulative mass tau.

    probs: [m, n] rows of gate probabilities. Returns float mask [m, n].
    """
    m, n = probs.shape
    mask = np.zeros((m, n))
    for r in range(m):
        order = _descending_order(probs[r])
        total = 0.0
        for j in range(n):
            idx = order[j]
            total += probs[r, idx]
            mask[r, idx] = 1.0
            if total >= tau:
                break
    return mask


@njit(cache=True)
def _adaptive_mask_nb(probs, tau):
    m, n = probs.shape
    mask = np.zeros((m, n))
    taken = np.zeros(n, dtype=np.bool_)
    for r in range(m):
        taken[:] = False
        total = 0.0
        for _ in range(n):
            best = -1
            best_val = -1.0
            for i in range(n):
                if not taken[i] and probs[r, i] > best_val:
                    best_val = probs[r, i]
                    best = i
            taken[best] = True
            total += probs[r, best]
            mask[r, best] = 1.0
            if total >= tau:
                break
    return mask


def topk_mask_numpy(probs: np.ndarray, k: int) -> np.ndarray:
    m, n = probs.shape
    mask = np.zeros((m, n))
    for r in range(m):
        order = _descending_order(probs[r])
        mask[r, order[:k]] = 1.0
    return mask


@njit(cache=True)
def _topk_mask_nb(probs, k):
    m, n = probs.shape
    mask = np.zeros((m, n))
    taken = np.zeros(n, dtype=np.bool_)
    for r in range(m):
        taken[:] = False
        for _ in range(k):
            best = -1
            best_val = -1.0
            for i in range(n):
                if not taken[i] and probs[r, i] > best_val:
                    best_val = probs[r, i]
                    best = i
            taken[best] = True
            mask[r, best] = 1.0
    return mask


def adaptive_mask(probs: np.ndarray, tau: float) -> np.ndarray:
    if NUMBA_ENABLED:
        return _adaptive_mask_nb(np.ascontiguousarray(probs), float(tau))
    return adaptive_mask_numpy(probs, tau)


def topk_mask(probs: np.ndarray, k: int) -> np.ndarray:
    if NUMBA_ENABLED:
        return _topk_mask_nb(np.ascontiguousarray(probs), int(k))
    return topk_mask_numpy(probs, k)


# ---------------------------------------------------------------------------
# stable token hashing for the hash-routing baseline


def stable_hash(index: int) -> int:
    """splitmix64 finalizer; platform-independent, unlike Python's hash()."""
    z = (int(index) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def hash_mask(num_tokens: int, n: int) -> np.ndarray:
    mask = np.zeros((num_tokens, n))
    for t in range(num_tokens):
        mask[t, stable_hash(t) % n] = 1.0
    return mask


# ---------------------------------------------------------------------------
# per-query ranking statistics
#
# Input is the relevance of the gallery after sorting by descending
# similarity (ties already broken by ascending gallery index upstream).
# Output per query: first-hit rank, average precision, inverse negative
# penalty = (#relevant) / rank-of-last-relevant.


def ranking_stats_numpy(matches_sorted: np.ndarray):
    nq, ng = matches_sorted.shape
    first_hit = np.zeros(nq, dtype=np.int64)
    ap = np.zeros(nq)
    inp = np.zeros(nq)
    for q in range(nq):
        row = matches_sorted[q]
        hits = np.flatnonzero(row)
        first_hit[q] = hits[0] + 1
        # left-to-right accumulation, bit-identical to the numba path
        prec_sum = 0.0
        for rank, j in enumerate(hits, start=1):
            prec_sum += rank / (j + 1.0)
        ap[q] = prec_sum / hits.size
        inp[q] = hits.size / (hits[-1] + 1.0)
    return first_hit, ap, inp


@njit(cache=True)
def _ranking_stats_nb(matches_sorted):
    nq, ng = matches_sorted.shape
    first_hit = np.zeros(nq, dtype=np.int64)
    ap = np.zeros(nq)
    inp = np.zeros(nq)
    for q in range(nq):
        hits = 0
        prec_sum = 0.0
        last = -1
        for j in range(ng):
            if matches_sorted[q, j]:
                hits += 1
                prec_sum += hits / (j + 1.0)
                last = j
                if hits == 1:
                    first_hit[q] = j + 1
        ap[q] = prec_sum / hits
        inp[q] = hits / (last + 1.0)
    return first_hit, ap, inp


def ranking_stats(matches_sorted: np.ndarray):
    m = np.ascontiguousarray(matches_sorted, dtype=np.bool_)
    if m.ndim != 2 or not m.any(axis=1).all():
        raise ValueError("ranking_stats: every query needs at least one relevant item")
    if NUMBA_ENABLED:
        return _ranking_stats_nb(m)
    return ranking_stats_numpy(m)
