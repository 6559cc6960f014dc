"""Full retrieval model: dual encoders, MoE adapters, fusion and placeholders.

Holds the complete parameter registry (frozen backbone stand-ins plus the
trainable adapter/gate/fusion/placeholder tensors) and the forward paths
used by training and evaluation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Sample
from .encoder import EncoderConfig, TextEncoder, VisualEncoder, freeze_partition
from .fusion import (FUSER_KINDS, MODES, FusionBlockParams, FusedFeatureSet,
                     LearnableEmbeddingFeature, ModalityBundle, FusionError,
                     fuse, mode_modalities, produce_fused_set, resolve_bundle,
                     subset_bundle)
from .moe import AEAMoELayer, ExpertAdapter, GatingNetwork, ROUTER_KINDS


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_experts: int = 6
    threshold: float = 0.6
    router: str = "adaptive"
    topk_k: int = 2
    fusion: str = "cmqf"
    use_lef: bool = True
    lef_length: int = 4
    init_seed: int = 0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ModelError("need at least one expert")
        if self.router not in ROUTER_KINDS:
            raise ModelError(f"unknown router {self.router!r}")
        if self.fusion not in FUSER_KINDS:
            raise ModelError(f"unknown fusion kind {self.fusion!r}")

    @property
    def bottleneck_dim(self) -> int:
        return max(1, self.encoder.model_dim // 4)


def _trainable(rng, *shape, scale=0.05) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _build_moe_layer(cfg: ModelConfig, rng) -> AEAMoELayer:
    d = cfg.encoder.model_dim
    b = cfg.bottleneck_dim
    gate = GatingNetwork(weights=_trainable(rng, cfg.num_experts, d))
    experts = [ExpertAdapter(down=_trainable(rng, d, b),
                             down_bias=Tensor(np.zeros(b), requires_grad=True),
                             up=_trainable(rng, b, d),
                             up_bias=Tensor(np.zeros(d), requires_grad=True))
               for _ in range(cfg.num_experts)]
    return AEAMoELayer(gate=gate, experts=experts, threshold=cfg.threshold,
                       router_kind=cfg.router, topk_k=cfg.topk_k)


class RetrievalModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        enc = config.encoder
        rng = np.random.default_rng(config.init_seed)
        self.visual_moe = [_build_moe_layer(config, rng) for _ in range(enc.num_blocks)]
        self.text_moe = [_build_moe_layer(config, rng) for _ in range(enc.num_blocks)]
        self.visual_encoder = VisualEncoder(enc, self.visual_moe)
        self.text_encoder = TextEncoder(enc, self.text_moe)
        self.fusion_params = FusionBlockParams.create(
            enc.model_dim, enc.num_heads,
            seed=int(rng.integers(0, 2**31)))
        if config.use_lef:
            self.lef = LearnableEmbeddingFeature.create(
                enc.model_dim, config.lef_length, seed=int(rng.integers(0, 2**31)))
        else:
            self.lef = LearnableEmbeddingFeature.zeros(enc.model_dim, config.lef_length)

    # -- parameter registry -------------------------------------------------

    def parameters(self) -> dict:
        out = {}
        out.update(self.visual_encoder.frozen_params("visual"))
        out.update(self.text_encoder.frozen_params("text"))
        for scope, layers in (("visual", self.visual_moe), ("text", self.text_moe)):
            for b, layer in enumerate(layers):
                out[f"{scope}.moe{b}.gate"] = layer.gate.weights
                for e, exp in enumerate(layer.experts):
                    out[f"{scope}.moe{b}.expert{e}.down"] = exp.down
                    out[f"{scope}.moe{b}.expert{e}.down_bias"] = exp.down_bias
                    out[f"{scope}.moe{b}.expert{e}.up"] = exp.up
                    out[f"{scope}.moe{b}.expert{e}.up_bias"] = exp.up_bias
        out.update(self.fusion_params.named())
        for slot in ("sketch", "infrared", "text"):
            out[f"lef.{slot}"] = getattr(self.lef, slot)
        return out

    def partition(self):
        return freeze_partition(self.parameters())

    def trainable_parameters(self) -> dict:
        return {n: p for n, p in self.parameters().items() if p.requires_grad}

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        params = self.parameters()
        for name in sorted(params):
            p = params[name]
            if not p.requires_grad:
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict:
        return {n: p.data for n, p in sorted(self.parameters().items())}

    def load_state_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ModelError("checkpoint parameter names do not match the model")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ModelError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    # -- forward paths ------------------------------------------------------

    def encode_sample(self, sample: Sample):
        if sample.modality == "text":
            return self.text_encoder.encode(sample.payload)
        return self.visual_encoder.encode(sample.payload, sample.modality)

    def encode_bundle(self, samples: dict):
        """Encode a per-modality sample dict; returns (bundle, gallery, ada_terms)."""
        ada = []
        seqs = {}
        for modality, sample in samples.items():
            seq, terms = self.encode_sample(sample)
            seqs[modality] = seq
            ada.extend(terms)
        gallery = seqs.pop("rgb", None)
        bundle = ModalityBundle(
            sketch=seqs["sketch"].tokens if "sketch" in seqs else None,
            infrared=seqs["infrared"].tokens if "infrared" in seqs else None,
            text=seqs["text"].tokens if "text" in seqs else None)
        return bundle, gallery, ada

    def fused_query(self, bundle: ModalityBundle, mode: str,
                    globals_by_modality: dict | None = None) -> Tensor:
        """One fused query feature for a mode-restricted bundle."""
        if self.config.fusion == "mean":
            if not globals_by_modality:
                raise ModelError("mean fusion needs per-modality global features")
            feats = [globals_by_modality[m] for m in mode_modalities(mode)]
            return ad.meanop(ad.stack_rows(feats), axis=0)
        triple = resolve_bundle(bundle, self.lef, mode)
        return fuse(self.config.fusion, triple, self.fusion_params)

    def fused_set(self, bundle: ModalityBundle, gallery) -> FusedFeatureSet:
        return produce_fused_set(bundle, self.lef, self.fusion_params, gallery)
