"""Cross-modal query fusion over sketch/infrared/text token sequences.

Each modality owns an attention block whose query input is the elementwise
sum of the other two modalities' tokens; the three outputs are concatenated,
passed through a shared block and mean-pooled into one feature. Absent
modalities are substituted by learnable placeholder token sequences so all
seven query combinations traverse the same path. Concatenation, summation
and hierarchical baselines share the interface for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import attend

FUSER_KINDS = ("cmqf", "concat", "sum", "hierarchical", "mean")

MODES = ("t", "s", "ir", "t+s", "t+ir", "s+ir", "t+s+ir")

_MODALITY_KEYS = {"t": "text", "s": "sketch", "ir": "infrared"}


class FusionError(Exception):
    pass


def mode_modalities(mode: str) -> tuple:
    if mode not in MODES:
        raise FusionError(f"unknown retrieval mode {mode!r}")
    return tuple(_MODALITY_KEYS[p] for p in mode.split("+"))


@dataclass
class ModalityBundle:
    sketch: Tensor | None = None
    infrared: Tensor | None = None
    text: Tensor | None = None

    def __post_init__(self):
        if self.sketch is None and self.infrared is None and self.text is None:
            raise FusionError("bundle must contain at least one modality")

    @property
    def presence(self) -> dict:
        return {"sketch": self.sketch is not None,
                "infrared": self.infrared is not None,
                "text": self.text is not None}


@dataclass
class LearnableEmbeddingFeature:
    """Trainable placeholder token sequences, one per modality slot."""

    sketch: Tensor
    infrared: Tensor
    text: Tensor

    @classmethod
    def create(cls, model_dim: int, length: int = 4, seed: int = 0, scale: float = 0.02):
        rng = np.random.default_rng(seed)
        mk = lambda: Tensor(rng.normal(0.0, scale, size=(length, model_dim)),
                            requires_grad=True)
        return cls(sketch=mk(), infrared=mk(), text=mk())

    @classmethod
    def zeros(cls, model_dim: int, length: int = 4):
        # placeholder-ablation variant: fixed all-zero stand-ins
        mk = lambda: Tensor(np.zeros((length, model_dim)))
        return cls(sketch=mk(), infrared=mk(), text=mk())


@dataclass
class AttentionBlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FusionBlockParams:
    tl_s: AttentionBlockParams
    tl_ir: AttentionBlockParams
    tl_t: AttentionBlockParams
    tl_fu: AttentionBlockParams
    num_heads: int = 4

    @classmethod
    def create(cls, model_dim: int, num_heads: int = 4, seed: int = 0, scale: float = 0.05):
        rng = np.random.default_rng(seed)
        eye = np.eye(model_dim)

        def block():
            # wv and wo start near the identity so the untrained module
            # behaves like token averaging instead of a random projection
            def mk(identity_biased):
                w = rng.normal(0.0, scale, size=(model_dim, model_dim))
                if identity_biased:
                    w = w + eye
                return Tensor(w, requires_grad=True)

            return AttentionBlockParams(wq=mk(False), wk=mk(False),
                                        wv=mk(True), wo=mk(True))

        return cls(tl_s=block(), tl_ir=block(), tl_t=block(), tl_fu=block(),
                   num_heads=num_heads)

    def named(self) -> dict:
        out = {}
        for bname in ("tl_s", "tl_ir", "tl_t", "tl_fu"):
            bp = getattr(self, bname)
            for w in ("wq", "wk", "wv", "wo"):
                out[f"fusion.{bname}.{w}"] = getattr(bp, w)
        return out


def resolve_bundle(bundle: ModalityBundle, lef: LearnableEmbeddingFeature,
                   mode: str) -> tuple:
    """Complete the (sketch, infrared, text) triple for a retrieval mode."""
    required = set(mode_modalities(mode))
    for key, present in bundle.presence.items():
        if present != (key in required):
            raise FusionError(
                f"mode {mode!r} requires exactly {sorted(required)}, "
                f"but bundle presence is {bundle.presence}")
    return (bundle.sketch if bundle.sketch is not None else lef.sketch,
            bundle.infrared if bundle.infrared is not None else lef.infrared,
            bundle.text if bundle.text is not None else lef.text)


def _check_triple(triple):
    widths = set()
    for x in triple:
        if x.data.ndim != 2 or x.shape[0] == 0:
            raise FusionError(f"modality sequence must be a nonempty matrix, got {x.shape}")
        widths.add(x.shape[1])
    if len(widths) != 1:
        raise FusionError(f"modality widths disagree: {sorted(widths)}")


def _aligned_sum(a: Tensor, b: Tensor) -> Tensor:
    """Sum token sequences, zero-padding the shorter one."""
    target = max(a.shape[0], b.shape[0])
    if a.shape[0] < target:
        a = ad.pad_rows(a, target)
    if b.shape[0] < target:
        b = ad.pad_rows(b, target)
    return ad.add(a, b)


def _cross_block(query_src: Tensor, kv_src: Tensor, bp: AttentionBlockParams,
                 num_heads: int) -> Tensor:
    q = ad.matmul(query_src, bp.wq)
    k = ad.matmul(kv_src, bp.wk)
    v = ad.matmul(kv_src, bp.wv)
    return ad.matmul(attend(q, k, v, num_heads), bp.wo)


def _shared_block(y: Tensor, bp: AttentionBlockParams, num_heads: int) -> Tensor:
    return _cross_block(y, y, bp, num_heads)


def cmqf_fuse(triple: tuple, params: FusionBlockParams) -> Tensor:
    x_s, x_ir, x_t = triple
    _check_triple(triple)
    y_s = _cross_block(_aligned_sum(x_ir, x_t), x_s, params.tl_s, params.num_heads)
    y_ir = _cross_block(_aligned_sum(x_s, x_t), x_ir, params.tl_ir, params.num_heads)
    y_t = _cross_block(_aligned_sum(x_s, x_ir), x_t, params.tl_t, params.num_heads)
    y = ad.concat([y_s, y_ir, y_t], axis=0)
    return ad.meanop(_shared_block(y, params.tl_fu, params.num_heads), axis=0)


def baseline_fuse(kind: str, triple: tuple, params: FusionBlockParams) -> Tensor:
    _check_triple(triple)
    x_s, x_ir, x_t = triple
    if kind == "concat":
        y = ad.concat([x_s, x_ir, x_t], axis=0)
    elif kind == "sum":
        y = _aligned_sum(_aligned_sum(x_s, x_ir), x_t)
    elif kind == "hierarchical":
        y = ad.concat([
            _shared_block(x_s, params.tl_s, params.num_heads),
            _shared_block(x_ir, params.tl_ir, params.num_heads),
            _shared_block(x_t, params.tl_t, params.num_heads),
        ], axis=0)
    else:
        raise FusionError(f"unknown baseline fuser {kind!r}")
    return ad.meanop(_shared_block(y, params.tl_fu, params.num_heads), axis=0)


def fuse(kind: str, triple: tuple, params: FusionBlockParams) -> Tensor:
    if kind == "cmqf":
        return cmqf_fuse(triple, params)
    return baseline_fuse(kind, triple, params)


@dataclass
class FusedFeatureSet:
    """The seven per-mode query features plus the rgb gallery feature."""

    features: dict  # mode -> Tensor [model_dim]
    v_cls_rgb: Tensor

    def __post_init__(self):
        missing = [m for m in MODES if m not in self.features]
        if missing:
            raise FusionError(f"fused set missing modes {missing}")


def subset_bundle(bundle: ModalityBundle, mode: str) -> ModalityBundle:
    """Restrict a complete bundle to exactly the modalities a mode uses."""
    required = set(mode_modalities(mode))
    pick = lambda key, val: val if key in required else None
    return ModalityBundle(sketch=pick("sketch", bundle.sketch),
                          infrared=pick("infrared", bundle.infrared),
                          text=pick("text", bundle.text))


def produce_fused_set(bundle: ModalityBundle, lef: LearnableEmbeddingFeature,
                      params: FusionBlockParams, gallery) -> FusedFeatureSet:
    """Fuse a complete bundle under all seven modes against an rgb gallery."""
    if gallery.modality_tag != "rgb":
        raise FusionError(f"gallery must be rgb, got {gallery.modality_tag!r}")
    if not all(bundle.presence.values()):
        raise FusionError("produce_fused_set needs a complete three-modality bundle")
    features = {}
    for mode in MODES:
        triple = resolve_bundle(subset_bundle(bundle, mode), lef, mode)
        features[mode] = cmqf_fuse(triple, params)
    return FusedFeatureSet(features=features, v_cls_rgb=gallery.global_feature)
