import numpy as np
import pytest

from mmreid.encoder import (EncoderConfig, EncoderError, TextEncoder,
                            VisualEncoder, freeze_partition)
from mmreid.model import ModelConfig, RetrievalModel


def small_config(**overrides):
    base = dict(model_dim=8, num_blocks=1, num_heads=2, patch_grid=(2, 2),
                vocab_size=32, max_text_len=6, freeze_seed=0)
    base.update(overrides)
    return EncoderConfig(**base)


def build_model(**overrides):
    return RetrievalModel(ModelConfig(encoder=small_config(),
                                      num_experts=3, **overrides))


class TestConfigValidation:
    def test_dim_head_divisibility(self):
        with pytest.raises(EncoderError):
            small_config(model_dim=9)

    def test_text_len_minimum(self):
        with pytest.raises(EncoderError):
            small_config(max_text_len=2)

    def test_positive_fields(self):
        with pytest.raises(EncoderError):
            small_config(patch_grid=(0, 2))


class TestVisualEncoder:
    def test_encode_shapes_and_cls_global(self, rng):
        model = build_model()
        seq, ada = model.visual_encoder.encode(rng.normal(size=(2, 2)), "rgb")
        assert seq.tokens.shape == (5, 8)  # CLS + 4 patches
        np.testing.assert_array_equal(seq.global_feature.data, seq.tokens.data[0])
        assert seq.modality_tag == "rgb"
        assert len(ada) == 1

    def test_shared_across_visual_modalities(self, rng):
        model = build_model()
        px = rng.normal(size=(2, 2))
        a, _ = model.visual_encoder.encode(px, "sketch")
        b, _ = model.visual_encoder.encode(px, "infrared")
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)

    def test_unknown_modality(self, rng):
        model = build_model()
        with pytest.raises(EncoderError):
            model.visual_encoder.encode(rng.normal(size=(2, 2)), "depth")

    def test_bad_pixel_grid(self, rng):
        model = build_model()
        with pytest.raises(EncoderError):
            model.visual_encoder.encode(rng.normal(size=(3, 2)), "rgb")

    def test_deterministic(self, rng):
        px = rng.normal(size=(2, 2))
        a, _ = build_model().visual_encoder.encode(px, "rgb")
        b, _ = build_model().visual_encoder.encode(px, "rgb")
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)


class TestTextEncoder:
    def test_encode_uses_eos_global(self):
        model = build_model()
        seq, _ = model.text_encoder.encode([3, 7, 11])
        assert seq.tokens.shape == (5, 8)  # BOS + 3 + EOS
        np.testing.assert_array_equal(seq.global_feature.data, seq.tokens.data[-1])
        assert seq.modality_tag == "text"

    def test_out_of_vocabulary(self):
        model = build_model()
        with pytest.raises(EncoderError):
            model.text_encoder.encode([32])
        with pytest.raises(EncoderError):
            model.text_encoder.encode([-1])

    def test_overlong_sequence(self):
        model = build_model()
        with pytest.raises(EncoderError):
            model.text_encoder.encode([1, 2, 3, 4, 5])

    def test_marker_ids_outside_vocab(self):
        enc = build_model().text_encoder
        assert enc.bos_id == 32 and enc.eos_id == 33


class TestFreezePartition:
    def test_backbone_frozen_adapters_trainable(self):
        model = build_model()
        frozen, trainable = model.partition()
        assert frozen and trainable
        assert any(".wq" in n and n.startswith("visual.block") for n in frozen)
        assert "visual.moe0.gate" in trainable
        assert "fusion.tl_s.wq" in trainable
        assert "lef.sketch" in trainable
        assert not (frozen & trainable)

    def test_freeze_partition_covers_everything(self):
        model = build_model()
        params = model.parameters()
        frozen, trainable = freeze_partition(params)
        assert frozen | trainable == set(params)

    def test_frozen_digest_reproducible(self):
        assert build_model().frozen_digest() == build_model().frozen_digest()

    def test_frozen_digest_tracks_freeze_seed(self):
        a = build_model()
        b = RetrievalModel(ModelConfig(encoder=small_config(freeze_seed=1),
                                       num_experts=3))
        assert a.frozen_digest() != b.frozen_digest()

    def test_lef_disabled_is_frozen(self):
        model = build_model(use_lef=False)
        frozen, _ = model.partition()
        assert {"lef.sketch", "lef.infrared", "lef.text"} <= frozen
