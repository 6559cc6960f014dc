import pytest

from mmreid.config import (ConfigError, RunConfig, parse_config_text,
                           write_atomic)


class TestParsing:
    def test_values_comments_and_blank_lines(self):
        text = """
        # toy setup
        seed = 3
        moe.threshold = 0.4   # inline comment
        fusion = sum
        lef.enabled = false
        encoder.patch_grid = 4x2
        """
        values = parse_config_text(text)
        assert values == {"seed": 3, "moe.threshold": 0.4, "fusion": "sum",
                          "lef.enabled": False, "encoder.patch_grid": (4, 2)}

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("seed = 1\nbogus.key = 2\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just some words\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("seed = banana\n")

    def test_bad_grid(self):
        with pytest.raises(ConfigError):
            parse_config_text("encoder.patch_grid = 8by4\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            parse_config_text("lef.enabled = maybe\n")


class TestRunConfig:
    def test_defaults_present(self):
        cfg = RunConfig()
        assert cfg["moe.num_experts"] == 6
        assert cfg["moe.threshold"] == 0.6
        assert cfg["train.lambda"] == 0.5

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig({"nope": 1})

    def test_from_file_with_seed_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 5\nmoe.router = topk\n")
        cfg = RunConfig.from_file(path, seed_override=9)
        assert cfg["seed"] == 9 and cfg["moe.router"] == "topk"

    def test_from_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "absent.cfg")

    def test_effective_text_is_sorted_and_complete(self):
        text = RunConfig().effective_text()
        keys = [line.split(" = ")[0] for line in text.strip().splitlines()]
        assert keys == sorted(keys)
        assert "sdm.temperature" in keys

    def test_effective_text_reparses_to_same_values(self):
        cfg = RunConfig({"seed": 7, "fusion": "concat"})
        assert parse_config_text(cfg.effective_text()) == cfg.values

    def test_hash_tracks_values(self):
        assert RunConfig().hash() != RunConfig({"seed": 1}).hash()
        assert RunConfig({"seed": 1}).hash() == RunConfig({"seed": 1}).hash()

    def test_builds_component_configs(self):
        cfg = RunConfig({"seed": 2, "moe.num_experts": 4})
        assert cfg.synthetic_config().seed == 2
        assert cfg.model_config().num_experts == 4
        assert cfg.model_config(num_experts=9).num_experts == 9
        assert cfg.train_config().seed == 2
        assert cfg.encoder_config().model_dim == 32


class TestAtomicWrite:
    def test_writes_and_replaces(self, tmp_path):
        path = tmp_path / "out.txt"
        write_atomic(path, "one")
        write_atomic(path, "two")
        assert path.read_text() == "two"
        assert list(tmp_path.iterdir()) == [path]  # no leftover temp files

    def test_accepts_bytes(self, tmp_path):
        path = tmp_path / "out.bin"
        write_atomic(path, b"\x00\x01")
        assert path.read_bytes() == b"\x00\x01"
