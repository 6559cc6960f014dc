import math

import numpy as np
import pytest

from mmreid.autodiff import Tensor
from mmreid.model import RetrievalModel
from mmreid.train import (Adam, TrainConfig, TrainError, assemble_batches,
                          clip_gradients, cosine_lr, fit, load_checkpoint,
                          model_from_checkpoint, save_checkpoint, train_step)

from conftest import tiny_run_config


class TestConfig:
    def test_validation(self):
        with pytest.raises(TrainError):
            TrainConfig(epochs=0)
        with pytest.raises(TrainError):
            TrainConfig(learning_rate=0.0)


class TestSchedule:
    def test_cosine_endpoints(self):
        assert cosine_lr(1.0, 0, 30) == 1.0
        assert abs(cosine_lr(1.0, 30, 30)) < 1e-15
        assert 0.49 < cosine_lr(1.0, 15, 30) < 0.51

    def test_monotone_decay(self):
        values = [cosine_lr(1.0, e, 30) for e in range(31)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestClip:
    def test_scales_to_max_norm(self, rng):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.array([3.0, 4.0, 0.0, 0.0])
        norm = clip_gradients({"p": p}, 2.5)
        assert abs(norm - 5.0) < 1e-12
        assert abs(np.linalg.norm(p.grad) - 2.5) < 1e-12

    def test_leaves_small_gradients_alone(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.3, 0.4])
        clip_gradients({"p": p}, 5.0)
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])


class TestBatches:
    def test_balanced_one_sample_per_modality(self, tiny_splits, rng):
        train, _ = tiny_splits
        batches = assemble_batches(train, 2, rng)
        assert len(batches) == 2  # 4 train identities, batch of 2
        for batch in batches:
            for ident, picks in batch:
                assert set(picks) == {"rgb", "sketch", "infrared", "text"}
                for m, sample in picks.items():
                    assert sample.identity == ident and sample.modality == m

    def test_partial_batch_dropped(self, tiny_splits, rng):
        train, _ = tiny_splits
        assert len(assemble_batches(train, 3, rng)) == 1

    def test_missing_modality_rejected(self, tiny_splits, rng):
        train, _ = tiny_splits
        import copy
        broken = copy.copy(train)
        broken.samples = [s for s in train.samples if s.modality != "text"]
        with pytest.raises(TrainError):
            assemble_batches(broken, 2, rng)


class TestAdam:
    def test_state_round_trip(self, rng):
        p = Tensor(rng.normal(size=3), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.ones(3)
        opt.step()
        state = opt.state()
        p2 = Tensor(p.data.copy(), requires_grad=True)
        opt2 = Adam({"p": p2}, lr=0.1)
        opt2.load_state(state)
        p.grad = np.full(3, 0.5)
        p2.grad = np.full(3, 0.5)
        opt.step()
        opt2.step()
        np.testing.assert_array_equal(p.data, p2.data)


class TestFit:
    def _setup(self, tiny_cfg, tiny_splits, **train_overrides):
        train, _ = tiny_splits
        model = RetrievalModel(tiny_cfg.model_config())
        cfg = tiny_cfg.train_config(**train_overrides)
        return model, train, cfg

    def test_history_and_finite_losses(self, tiny_cfg, tiny_splits):
        model, train, cfg = self._setup(tiny_cfg, tiny_splits)
        history, _ = fit(model, train, cfg)
        assert len(history) == cfg.epochs
        for rec in history:
            assert math.isfinite(rec["total"])
            assert abs(rec["total"] - (rec["sdm"] + cfg.lam * rec["ada"])) < 1e-9

    def test_deterministic_given_seed(self, tiny_cfg, tiny_splits):
        h1, _ = fit(RetrievalModel(tiny_cfg.model_config()), tiny_splits[0],
                    tiny_cfg.train_config())
        h2, _ = fit(RetrievalModel(tiny_cfg.model_config()), tiny_splits[0],
                    tiny_cfg.train_config())
        assert h1 == h2

    def test_batch_too_large_rejected(self, tiny_cfg, tiny_splits):
        model, train, cfg = self._setup(tiny_cfg, tiny_splits, batch_identities=16)
        with pytest.raises(TrainError):
            fit(model, train, cfg)

    def test_frozen_partition_untouched(self, tiny_cfg, tiny_splits):
        model, train, cfg = self._setup(tiny_cfg, tiny_splits)
        digest = model.frozen_digest()
        fit(model, train, cfg)
        assert model.frozen_digest() == digest

    def test_training_changes_trainable_parameters(self, tiny_cfg, tiny_splits):
        model, train, cfg = self._setup(tiny_cfg, tiny_splits)
        before = {n: p.data.copy() for n, p in model.trainable_parameters().items()}
        fit(model, train, cfg)
        changed = [n for n, p in model.trainable_parameters().items()
                   if not np.array_equal(before[n], p.data)]
        assert changed


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tiny_cfg, tiny_splits, tmp_path):
        train, test = tiny_splits
        model = RetrievalModel(tiny_cfg.model_config())
        path = tmp_path / "model.ckpt"
        fit(model, train, tiny_cfg.train_config(), checkpoint_path=path)
        restored = model_from_checkpoint(path)
        sample = next(s for s in test.samples if s.modality == "rgb")
        a, _ = model.encode_sample(sample)
        b, _ = restored.encode_sample(sample)
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)
        np.testing.assert_array_equal(a.global_feature.data, b.global_feature.data)

    def test_resume_matches_uninterrupted_run(self, tiny_cfg, tiny_splits, tmp_path):
        train, _ = tiny_splits
        full_model = RetrievalModel(tiny_cfg.model_config())
        full_hist, _ = fit(full_model, train, tiny_cfg.train_config(epochs=4))

        part_model = RetrievalModel(tiny_cfg.model_config())
        mid = tmp_path / "mid.ckpt"
        fit(part_model, train, tiny_cfg.train_config(epochs=4),
            checkpoint_path=mid, stop_after=2)
        resumed = RetrievalModel(tiny_cfg.model_config())
        resumed_hist, _ = fit(resumed, train, tiny_cfg.train_config(epochs=4),
                              resume_from=mid)
        assert resumed_hist == full_hist
        for name, p in full_model.parameters().items():
            np.testing.assert_array_equal(p.data, resumed.parameters()[name].data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(TrainError):
            load_checkpoint(path)

    def test_truncated_checkpoint_rejected(self, tiny_cfg, tiny_splits, tmp_path):
        train, _ = tiny_splits
        model = RetrievalModel(tiny_cfg.model_config())
        path = tmp_path / "model.ckpt"
        fit(model, train, tiny_cfg.train_config(epochs=1), checkpoint_path=path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(TrainError):
            load_checkpoint(path)

    def test_header_round_trips_configs(self, tiny_cfg, tiny_splits, tmp_path):
        train, _ = tiny_splits
        model = RetrievalModel(tiny_cfg.model_config())
        cfg = tiny_cfg.train_config(epochs=1)
        path = tmp_path / "model.ckpt"
        fit(model, train, cfg, checkpoint_path=path)
        state = load_checkpoint(path)
        assert state["model_config"] == model.config
        assert state["train_config"] == cfg
        assert state["epoch"] == 1
