"""Ranked-retrieval metrics: Rank-k, mAP and mINP.

Galleries are ranked by descending similarity with ties broken by
ascending gallery index so results are reproducible across platforms.
The per-query statistics run through the kernels module (numba or numpy).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class MetricError(Exception):
    pass


@dataclass
class RankedGallery:
    ordering: np.ndarray  # permutation of gallery indices, best first
    relevance: np.ndarray  # bool per gallery item (same identity as query)

    def __post_init__(self):
        self.ordering = np.asarray(self.ordering, dtype=np.int64)
        self.relevance = np.asarray(self.relevance, dtype=bool)
        n = self.relevance.size
        if sorted(self.ordering.tolist()) != list(range(n)):
            raise MetricError("ordering is not a permutation of the gallery")
        if not self.relevance.any():
            raise MetricError("query has no relevant gallery item")

    @property
    def matches(self) -> np.ndarray:
        return self.relevance[self.ordering]


def rank_gallery(similarities: np.ndarray, relevance: np.ndarray) -> RankedGallery:
    sims = np.asarray(similarities, dtype=np.float64)
    # stable sort on negated similarity: equal scores keep ascending index
    ordering = np.argsort(-sims, kind="stable")
    return RankedGallery(ordering=ordering, relevance=relevance)


def _matches_matrix(galleries) -> np.ndarray:
    sizes = {g.relevance.size for g in galleries}
    if len(sizes) != 1:
        raise MetricError("galleries have mixed sizes")
    return np.stack([g.matches for g in galleries])


def rank_k(galleries, k: int) -> float:
    """Fraction of queries with a relevant item in the top k."""
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    m = _matches_matrix(galleries)
    if k > m.shape[1]:
        raise MetricError(f"k={k} exceeds gallery size {m.shape[1]}")
    first_hit, _, _ = kernels.ranking_stats(m)
    return float(np.mean(first_hit <= k))


def mean_average_precision(galleries) -> float:
    _, ap, _ = kernels.ranking_stats(_matches_matrix(galleries))
    return float(ap.mean())


def mean_inverse_negative_penalty(galleries) -> float:
    _, _, inp = kernels.ranking_stats(_matches_matrix(galleries))
    return float(inp.mean())


@dataclass
class ModeResult:
    mode: str
    r1: float
    r5: float
    r10: float
    map: float
    minp: float
    num_queries: int

    def as_dict(self) -> dict:
        return {"mode": self.mode, "r1": self.r1, "r5": self.r5, "r10": self.r10,
                "map": self.map, "minp": self.minp, "num_queries": self.num_queries}


@dataclass
class RetrievalReport:
    results: list
    seed: int
    config_hash: str
    elapsed_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def result_for(self, mode: str) -> ModeResult:
        for r in self.results:
            if r.mode == mode:
                return r
        raise MetricError(f"no result for mode {mode!r}")

    @property
    def avg_r1(self) -> float:
        return float(np.mean([r.r1 for r in self.results]))

    def to_jsonl(self) -> str:
        # elapsed_seconds deliberately left out: serialized reports must be
        # byte-identical across runs with equal (seed, config)
        header = {"record": "header", "seed": self.seed, "config_hash": self.config_hash,
                  **self.meta}
        lines = [json.dumps(header, sort_keys=True)]
        for r in self.results:
            lines.append(json.dumps({"record": "mode", **r.as_dict()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["mode", "r1", "r5", "r10", "map", "minp", "num_queries",
                    "seed", "config_hash"])
        for r in self.results:
            w.writerow([r.mode, repr(r.r1), repr(r.r5), repr(r.r10), repr(r.map),
                        repr(r.minp), r.num_queries, self.seed, self.config_hash])
        return buf.getvalue()


def mode_result(mode: str, galleries) -> ModeResult:
    size = galleries[0].relevance.size
    return ModeResult(
        mode=mode,
        r1=rank_k(galleries, 1),
        r5=rank_k(galleries, min(5, size)),
        r10=rank_k(galleries, min(10, size)),
        map=mean_average_precision(galleries),
        minp=mean_inverse_negative_penalty(galleries),
        num_queries=len(galleries),
    )
