"""Adaptive expert allocation mixture-of-experts adapter layer.

The gate scores each token, adaptive routing activates the smallest
descending-confidence expert set whose cumulative probability reaches the
threshold, and the selected bottleneck adapters are summed with their gate
probabilities as weights (no renormalization). Top-K, soft and hash routers
are provided as ablation baselines behind the same interface. An entropy
term over the gate distribution discourages diffuse routing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

ROUTER_KINDS = ("adaptive", "topk", "soft", "hash")


class RoutingError(Exception):
    pass


@dataclass
class GatingNetwork:
    weights: Tensor  # [num_experts, model_dim]

    @property
    def num_experts(self) -> int:
        return self.weights.shape[0]


@dataclass
class ConfidenceVector:
    probs: Tensor  # [num_experts]

    def __post_init__(self):
        p = self.probs.data
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise RoutingError("confidence vector must be a probability distribution")


@dataclass
class RoutingDecision:
    selected: tuple  # expert indices, in activation order
    gains: np.ndarray  # length num_experts


@dataclass
class ExpertAdapter:
    """Bottleneck feed-forward unit: down-project, ReLU, up-project."""

    down: Tensor  # [model_dim, bottleneck_dim]
    down_bias: Tensor  # [bottleneck_dim]
    up: Tensor  # [bottleneck_dim, model_dim]
    up_bias: Tensor  # [model_dim]

    def apply(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.down), self.down_bias))
        return ad.add(ad.matmul(h, self.up), self.up_bias)


@dataclass
class AEAMoELayer:
    gate: GatingNetwork
    experts: list
    threshold: float = 0.6
    router_kind: str = "adaptive"
    topk_k: int = 2

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise RoutingError(f"threshold {self.threshold} outside (0, 1]")
        if self.router_kind not in ROUTER_KINDS:
            raise RoutingError(f"unknown router kind {self.router_kind!r}")
        if len(self.experts) != self.gate.num_experts or not self.experts:
            raise RoutingError("expert list must match gate row count and be nonempty")

    @property
    def num_experts(self) -> int:
        return self.gate.num_experts


def gate_confidence(x: Tensor, gate: GatingNetwork) -> ConfidenceVector:
    """Softmax gate scores for a single token feature."""
    if x.data.ndim != 1 or x.shape[0] != gate.weights.shape[1]:
        raise RoutingError(
            f"gate_confidence: feature shape {x.shape} vs gate {gate.weights.shape}")
    logits = ad.matmul(gate.weights, ad.reshape(x, (x.shape[0], 1)))
    probs = ad.reshape(ad.softmax(logits, axis=0), (gate.num_experts,))
    return ConfidenceVector(probs=probs)


def _decision_from_mask(probs: np.ndarray, mask: np.ndarray, order) -> RoutingDecision:
    selected = tuple(i for i in order if mask[i] > 0)
    return RoutingDecision(selected=selected, gains=probs * mask)


def adaptive_route(p: ConfidenceVector, tau: float) -> RoutingDecision:
    """Smallest descending-confidence prefix with cumulative mass >= tau."""
    if not (0.0 < tau <= 1.0):
        raise RoutingError(f"threshold {tau} outside (0, 1]")
    probs = p.probs.data
    mask = kernels.adaptive_mask(probs[None, :], tau)[0]
    return _decision_from_mask(probs, mask, kernels._descending_order(probs))


def topk_route(p: ConfidenceVector, k: int) -> RoutingDecision:
    probs = p.probs.data
    if not (1 <= k <= probs.size):
        raise RoutingError(f"K={k} out of range for {probs.size} experts")
    mask = kernels.topk_mask(probs[None, :], k)[0]
    return _decision_from_mask(probs, mask, kernels._descending_order(probs))


def soft_route(p: ConfidenceVector) -> RoutingDecision:
    probs = p.probs.data
    return RoutingDecision(selected=tuple(range(probs.size)), gains=probs.copy())


def hash_route(token_index: int, n: int) -> RoutingDecision:
    if n < 1:
        raise RoutingError("hash_route: need at least one expert")
    gains = np.zeros(n)
    chosen = kernels.stable_hash(token_index) % n
    gains[chosen] = 1.0
    return RoutingDecision(selected=(chosen,), gains=gains)


def routing_masks(probs: np.ndarray, layer: AEAMoELayer) -> np.ndarray:
    """Per-token 0/1 selection masks for a whole sequence at once."""
    if layer.router_kind == "adaptive":
        return kernels.adaptive_mask(probs, layer.threshold)
    if layer.router_kind == "topk":
        return kernels.topk_mask(probs, min(layer.topk_k, layer.num_experts))
    if layer.router_kind == "soft":
        return np.ones_like(probs)
    return kernels.hash_mask(probs.shape[0], layer.num_experts)


def moe_forward(x: Tensor, layer: AEAMoELayer):
    """Route each token and sum the selected adapters' outputs.

    Returns (output [L, model_dim], mean per-token gate entropy). The
    selection mask is treated as a constant, so gradients reach the gate
    only through the probabilities of selected experts, and unselected
    adapters receive none.
    """
    if x.data.ndim != 2:
        raise RoutingError(f"moe_forward: expected token matrix, got {x.shape}")
    logits = ad.matmul(x, ad.transpose(layer.gate.weights))
    probs = ad.softmax(logits, axis=1)
    mask = routing_masks(probs.data, layer)
    if layer.router_kind == "hash":
        gains = Tensor(mask)  # hash gains are 1 on the chosen expert
    else:
        gains = ad.maskc(probs, mask)

    out = None
    for i, expert in enumerate(layer.experts):
        if not mask[:, i].any():
            continue
        term = ad.scale_rows(expert.apply(x), ad.take_column(gains, i))
        out = term if out is None else ad.add(out, term)

    ent = ad.scale(ad.sumop(ad.hadamard(probs, ad.log(probs))), -1.0 / x.shape[0])
    return out, ent


def adaptive_loss(p: ConfidenceVector) -> Tensor:
    """Entropy of the gate distribution; 0 at one-hot, log n at uniform."""
    return ad.neg(ad.sumop(ad.hadamard(p.probs, ad.log(p.probs))))
