"""Line-oriented run configuration: ``key = value`` with # comments.

Dotted keys select sections (``moe.threshold = 0.6``). Unknown keys are
rejected; missing keys take the documented defaults. The effective config
(defaults applied) is hashed and echoed into every output artifact.
"""

from __future__ import annotations

import hashlib
import os
import tempfile

from .data import SyntheticConfig
from .encoder import EncoderConfig
from .losses import SDMConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


def _parse_grid(text: str) -> tuple:
    try:
        a, b = text.lower().split("x")
        return (int(a), int(b))
    except ValueError:
        raise ConfigError(f"expected ROWSxCOLS grid, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {text!r}")


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return f"{value[0]}x{value[1]}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "data.num_identities": (int, 64),
    "data.samples_per_identity": (int, 2),
    "data.latent_dim": (int, 16),
    "data.noise_scale": (float, 0.1),
    "data.pixel_grid": (_parse_grid, (8, 4)),
    "data.text_tokens": (int, 14),
    "data.mix_seed": (int, 7),
    "encoder.model_dim": (int, 32),
    "encoder.num_blocks": (int, 2),
    "encoder.num_heads": (int, 4),
    "encoder.patch_grid": (_parse_grid, (8, 4)),
    "encoder.vocab_size": (int, 512),
    "encoder.max_text_len": (int, 16),
    "encoder.freeze_seed": (int, 0),
    "moe.num_experts": (int, 6),
    "moe.threshold": (float, 0.6),
    "moe.router": (str, "adaptive"),
    "moe.topk_k": (int, 2),
    "fusion": (str, "cmqf"),
    "lef.enabled": (_parse_bool, True),
    "lef.length": (int, 4),
    "train.epochs": (int, 30),
    "train.batch_identities": (int, 4),
    "train.learning_rate": (float, 3.3e-3),
    "train.lambda": (float, 0.5),
    "train.clip_norm": (float, 5.0),
    "sdm.epsilon": (float, 1e-8),
    "sdm.temperature": (float, 0.02),
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except (ValueError, TypeError):
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key!r}") from None
    return values


class RunConfig:
    def __init__(self, overrides: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, val in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            self.values[key] = val

    @classmethod
    def from_file(cls, path, seed_override: int | None = None) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cls(parse_config_text(text))
        if seed_override is not None:
            cfg.values["seed"] = seed_override
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def effective_text(self) -> str:
        lines = [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.effective_text().encode()).hexdigest()[:16]

    def synthetic_config(self) -> SyntheticConfig:
        v = self.values
        return SyntheticConfig(
            num_identities=v["data.num_identities"],
            samples_per_identity_per_modality=v["data.samples_per_identity"],
            latent_dim=v["data.latent_dim"],
            noise_scale=v["data.noise_scale"],
            pixel_grid=v["data.pixel_grid"],
            text_tokens_per_sample=v["data.text_tokens"],
            modality_mix_seed=v["data.mix_seed"],
            seed=v["seed"])

    def encoder_config(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            model_dim=v["encoder.model_dim"],
            num_blocks=v["encoder.num_blocks"],
            num_heads=v["encoder.num_heads"],
            patch_grid=v["encoder.patch_grid"],
            vocab_size=v["encoder.vocab_size"],
            max_text_len=v["encoder.max_text_len"],
            freeze_seed=v["encoder.freeze_seed"])

    def model_config(self, **replacements) -> ModelConfig:
        v = self.values
        kwargs = dict(
            encoder=self.encoder_config(),
            num_experts=v["moe.num_experts"],
            threshold=v["moe.threshold"],
            router=v["moe.router"],
            topk_k=v["moe.topk_k"],
            fusion=v["fusion"],
            use_lef=v["lef.enabled"],
            lef_length=v["lef.length"],
            init_seed=v["seed"])
        kwargs.update(replacements)
        return ModelConfig(**kwargs)

    def train_config(self, **replacements) -> TrainConfig:
        v = self.values
        kwargs = dict(
            epochs=v["train.epochs"],
            batch_identities=v["train.batch_identities"],
            learning_rate=v["train.learning_rate"],
            lam=v["train.lambda"],
            clip_norm=v["train.clip_norm"],
            seed=v["seed"],
            sdm=SDMConfig(epsilon=v["sdm.epsilon"], temperature=v["sdm.temperature"]))
        kwargs.update(replacements)
        return TrainConfig(**kwargs)


def write_atomic(path, data) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
