"""Toy dual encoders with frozen backbones and trainable MoE adapter paths.

The visual encoder (shared by rgb, sketch and infrared) patch-embeds the
pixel grid, prepends a CLS token, adds positional embeddings and runs
pre-norm attention blocks; the text encoder embeds token ids between BOS
and EOS markers. All embedding, attention and normalization weights are
frozen stand-ins for a pretrained backbone, drawn from a seeded normal
distribution. The only trainable path inside a block is the MoE adapter
inserted after the attention sublayer, wrapped in a residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import multi_head_attention
from .moe import AEAMoELayer, moe_forward

# full-scale reference values (not the toy defaults): 77-token text
# sequences, 384x128 input images, a 49152-word vocabulary
FULL_SCALE_TEXT_LEN = 77
FULL_SCALE_IMAGE_SIZE = (384, 128)
FULL_SCALE_VOCAB = 49152

VISUAL_MODALITIES = ("rgb", "sketch", "infrared")


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 4
    patch_grid: tuple = (8, 4)
    vocab_size: int = 512
    max_text_len: int = 16
    freeze_seed: int = 0

    def __post_init__(self):
        if self.model_dim <= 0 or self.model_dim % self.num_heads != 0:
            raise EncoderError(
                f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.max_text_len < 3:
            raise EncoderError("max_text_len must leave room for BOS, one token, EOS")
        if min(self.patch_grid) < 1 or self.num_blocks < 1 or self.vocab_size < 1:
            raise EncoderError("patch_grid, num_blocks and vocab_size must be positive")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]


@dataclass
class EncodedSequence:
    tokens: Tensor  # [seq_len, model_dim]
    global_feature: Tensor  # [model_dim]
    modality_tag: str


def _frozen(rng, *shape, scale=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=False)


def _block_params(rng, d):
    return {
        "ln1_gain": Tensor(np.ones(d)), "ln1_bias": Tensor(np.zeros(d)),
        "wq": _frozen(rng, d, d), "wk": _frozen(rng, d, d),
        "wv": _frozen(rng, d, d), "wo": _frozen(rng, d, d),
        "ln2_gain": Tensor(np.ones(d)), "ln2_bias": Tensor(np.zeros(d)),
    }


class _EncoderBase:
    """Frozen block stack; subclasses provide the input token sequence."""

    def __init__(self, config: EncoderConfig, moe_layers: list):
        if len(moe_layers) != config.num_blocks:
            raise EncoderError("need one MoE layer per block")
        self.config = config
        self.moe_layers = moe_layers

    def _init_blocks(self, rng):
        d = self.config.model_dim
        self.blocks = [_block_params(rng, d) for _ in range(self.config.num_blocks)]
        self.ln_final_gain = Tensor(np.ones(d))
        self.ln_final_bias = Tensor(np.zeros(d))

    def _run_blocks(self, x: Tensor):
        cfg = self.config
        ada_terms = []
        for bp, moe in zip(self.blocks, self.moe_layers):
            attn_in = ad.layer_norm(x, bp["ln1_gain"], bp["ln1_bias"])
            x = ad.add(x, multi_head_attention(
                attn_in, attn_in, attn_in,
                bp["wq"], bp["wk"], bp["wv"], bp["wo"], cfg.num_heads))
            moe_out, ent = moe_forward(
                ad.layer_norm(x, bp["ln2_gain"], bp["ln2_bias"]), moe)
            x = ad.add(x, moe_out)
            ada_terms.append(ent)
        return ad.layer_norm(x, self.ln_final_gain, self.ln_final_bias), ada_terms

    def frozen_params(self, prefix: str) -> dict:
        out = {}
        for name in self._frozen_names:
            out[f"{prefix}.{name}"] = getattr(self, name)
        for b, bp in enumerate(self.blocks):
            for k, v in bp.items():
                out[f"{prefix}.block{b}.{k}"] = v
        out[f"{prefix}.ln_final_gain"] = self.ln_final_gain
        out[f"{prefix}.ln_final_bias"] = self.ln_final_bias
        return out


class VisualEncoder(_EncoderBase):
    _frozen_names = ("patch_weight", "patch_bias", "cls_token", "pos_embed")

    def __init__(self, config: EncoderConfig, moe_layers: list, patch_dim: int = 1):
        super().__init__(config, moe_layers)
        self.patch_dim = patch_dim
        rng = np.random.default_rng(config.freeze_seed)
        d = config.model_dim
        self.patch_weight = _frozen(rng, patch_dim, d, scale=0.5)
        self.patch_bias = _frozen(rng, d)
        self.cls_token = _frozen(rng, d)
        self.pos_embed = _frozen(rng, config.num_patches + 1, d)
        self._init_blocks(rng)

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        rows, cols = self.config.patch_grid
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] % rows or px.shape[1] % cols:
            raise EncoderError(
                f"pixel grid {px.shape} not divisible into patch grid {self.config.patch_grid}")
        ph, pw = px.shape[0] // rows, px.shape[1] // cols
        patches = px.reshape(rows, ph, cols, pw, px.shape[2])
        patches = patches.transpose(0, 2, 1, 3, 4).reshape(rows * cols, ph * pw * px.shape[2])
        if patches.shape[1] != self.patch_weight.shape[0]:
            raise EncoderError(
                f"patch size {patches.shape[1]} does not match embedding "
                f"input {self.patch_weight.shape[0]}")
        return patches

    def encode(self, pixels: np.ndarray, modality_tag: str):
        if modality_tag not in VISUAL_MODALITIES:
            raise EncoderError(f"unknown visual modality {modality_tag!r}")
        patches = Tensor(self.patchify(pixels))
        embedded = ad.add(ad.matmul(patches, self.patch_weight), self.patch_bias)
        cls_row = ad.reshape(self.cls_token, (1, self.config.model_dim))
        x = ad.add(ad.concat([cls_row, embedded], axis=0), self.pos_embed)
        tokens, ada_terms = self._run_blocks(x)
        return EncodedSequence(tokens, ad.take_row(tokens, 0), modality_tag), ada_terms


class TextEncoder(_EncoderBase):
    _frozen_names = ("token_embed", "pos_embed")

    def __init__(self, config: EncoderConfig, moe_layers: list):
        super().__init__(config, moe_layers)
        rng = np.random.default_rng(config.freeze_seed + 1)
        d = config.model_dim
        # two extra rows reserved for the BOS and EOS markers
        self.token_embed = _frozen(rng, config.vocab_size + 2, d, scale=0.5)
        self.pos_embed = _frozen(rng, config.max_text_len, d)
        self._init_blocks(rng)

    @property
    def bos_id(self) -> int:
        return self.config.vocab_size

    @property
    def eos_id(self) -> int:
        return self.config.vocab_size + 1

    def encode(self, token_ids):
        ids = np.asarray(token_ids, dtype=np.int64)
        cfg = self.config
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise EncoderError(f"token id out of vocabulary (size {cfg.vocab_size})")
        if ids.size > cfg.max_text_len - 2:
            raise EncoderError(
                f"sequence of {ids.size} tokens exceeds max_text_len {cfg.max_text_len} - 2")
        full = np.concatenate(([self.bos_id], ids, [self.eos_id]))
        x = ad.gather_rows(self.token_embed, full)
        pos = ad.Tensor(self.pos_embed.data[: full.size])
        x = ad.addc(x, pos.data)
        tokens, ada_terms = self._run_blocks(x)
        eos_pos = full.size - 1
        return EncodedSequence(tokens, ad.take_row(tokens, eos_pos), "text"), ada_terms


def freeze_partition(params: dict) -> tuple:
    """Split a name->Tensor map into (frozen, trainable) name sets."""
    frozen = {n for n, p in params.items() if not p.requires_grad}
    trainable = {n for n, p in params.items() if p.requires_grad}
    assert frozen.isdisjoint(trainable) and frozen | trainable == set(params)
    return frozen, trainable
