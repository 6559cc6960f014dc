"""Similarity distribution matching losses and the total objective.

The directional loss is the KL divergence between the row-softmax of the
query/gallery cosine similarities (divided by a temperature) and the true
match distribution, averaged over the batch. Both directions are summed,
the seven retrieval modes are summed, and the entropy routing term enters
the total objective with weight lambda.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import MODES


class LossError(Exception):
    pass


@dataclass(frozen=True)
class SDMConfig:
    epsilon: float = 1e-8
    temperature: float = 0.02

    def __post_init__(self):
        if self.epsilon <= 0 or self.temperature <= 0:
            raise LossError("epsilon and temperature must be positive")


def match_matrix(row_labels, col_labels) -> np.ndarray:
    """Per-row-normalized same-identity indicator (the q distribution)."""
    rows = np.asarray(row_labels).reshape(-1, 1)
    cols = np.asarray(col_labels).reshape(1, -1)
    q = (rows == cols).astype(np.float64)
    counts = q.sum(axis=1)
    if np.any(counts == 0):
        raise LossError("a query row has no true match in the gallery")
    return q / counts[:, None]


def kl_rows(p: Tensor, q: np.ndarray, epsilon: float) -> Tensor:
    """(1/N) sum_ij p_ij log(p_ij / (q_ij + eps)) for row distributions p."""
    if p.shape != q.shape:
        raise LossError(f"kl_rows: shapes {p.shape} vs {q.shape}")
    n = p.shape[0]
    log_ratio = ad.addc(ad.log(p), -np.log(q + epsilon))
    return ad.scale(ad.sumop(ad.hadamard(p, log_ratio)), 1.0 / n)


def sdm_directional(similarities: Tensor, row_labels, col_labels,
                    cfg: SDMConfig = SDMConfig()) -> Tensor:
    """One direction of the SDM loss over a square similarity block."""
    if similarities.data.ndim != 2:
        raise LossError(f"similarity block must be 2-d, got {similarities.shape}")
    q = match_matrix(row_labels, col_labels)
    p = ad.softmax(ad.scale(similarities, 1.0 / cfg.temperature), axis=1)
    return kl_rows(p, q, cfg.epsilon)


def cosine_block(queries: Tensor, galleries: Tensor) -> Tensor:
    return ad.matmul(ad.l2_normalize_rows(queries),
                     ad.transpose(ad.l2_normalize_rows(galleries)))


def sdm_bidirectional(queries: Tensor, galleries: Tensor, labels,
                      cfg: SDMConfig = SDMConfig()) -> Tensor:
    """Query->gallery plus gallery->query on the transposed block."""
    if queries.shape[0] != galleries.shape[0]:
        raise LossError("query and gallery counts differ")
    sims = cosine_block(queries, galleries)
    fwd = sdm_directional(sims, labels, labels, cfg)
    bwd = sdm_directional(ad.transpose(sims), labels, labels, cfg)
    return ad.add(fwd, bwd)


def sdm_sum(mode_features: dict, gallery_features: Tensor, labels,
            cfg: SDMConfig = SDMConfig()) -> Tensor:
    """Sum of the bidirectional loss over the seven retrieval modes."""
    missing = [m for m in MODES if m not in mode_features]
    if missing:
        raise LossError(f"missing fused features for modes {missing}")
    total = None
    for mode in MODES:
        term = sdm_bidirectional(mode_features[mode], gallery_features, labels, cfg)
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(sdm_total: Tensor, ada: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise LossError(f"lambda must be nonnegative, got {lam}")
    return ad.add(sdm_total, ad.scale(ada, lam))
