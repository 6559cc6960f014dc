"""Deterministic synthetic four-modality retrieval corpus and its file format.

Each identity gets a latent vector; rgb/sketch/infrared samples are fixed
per-modality linear transforms of the latent plus noise, reshaped to the
pixel grid; text samples quantize the (noisy) latent into token ids.
Datasets round-trip through a small binary container (magic ``CIRS``) with
a version field, a config echo and length-prefixed sample records.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

MAGIC = b"CIRS"
FORMAT_VERSION = 1

MODALITIES = ("rgb", "sketch", "infrared", "text")
_MOD_CODE = {m: i for i, m in enumerate(MODALITIES)}

TEXT_BINS = 8


class DatasetError(Exception):
    pass


class CorruptHeaderError(DatasetError):
    pass


class TruncationError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    num_identities: int = 64
    samples_per_identity_per_modality: int = 2
    latent_dim: int = 16
    noise_scale: float = 0.1
    pixel_grid: tuple = (8, 4)
    text_tokens_per_sample: int = 14
    modality_mix_seed: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 2:
            raise DatasetError("need at least 2 identities for retrieval")
        if self.samples_per_identity_per_modality < 1 or self.latent_dim < 1:
            raise DatasetError("sample count and latent_dim must be positive")
        if self.noise_scale < 0:
            raise DatasetError("noise_scale must be nonnegative")
        if self.text_tokens_per_sample > self.latent_dim:
            raise DatasetError("text_tokens_per_sample cannot exceed latent_dim")

    @property
    def num_pixels(self) -> int:
        return self.pixel_grid[0] * self.pixel_grid[1]

    @property
    def text_vocab_needed(self) -> int:
        return self.text_tokens_per_sample * TEXT_BINS


@dataclass
class Sample:
    identity: int
    modality: str
    payload: np.ndarray  # float64 pixel grid or int64 token ids

    def __eq__(self, other):
        return (self.identity == other.identity and self.modality == other.modality
                and self.payload.dtype == other.payload.dtype
                and self.payload.shape == other.payload.shape
                and np.array_equal(self.payload, other.payload))


@dataclass
class DatasetSplit:
    samples: list
    split_tag: str
    config: SyntheticConfig

    def identities(self) -> list:
        return sorted({s.identity for s in self.samples})

    def by_identity_modality(self) -> dict:
        out = {}
        for s in self.samples:
            out.setdefault((s.identity, s.modality), []).append(s)
        return out

    def counts(self) -> dict:
        out = {}
        for s in self.samples:
            out[s.modality] = out.get(s.modality, 0) + 1
        return out

    def __eq__(self, other):
        return (self.split_tag == other.split_tag and self.config == other.config
                and self.samples == other.samples)


def identity_latents(config: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return rng.normal(0.0, 1.0, size=(config.num_identities, config.latent_dim))


# how strongly a visual modality sees the latent half it is weak on;
# rgb sees everything, sketch mostly the first half, infrared the second,
# so no single query modality fully identifies a person but combinations do
PARTIAL_VIEW_WEIGHT = 0.4


def modality_transforms(config: SyntheticConfig) -> dict:
    rng = np.random.default_rng(config.modality_mix_seed)
    d = config.latent_dim
    base = rng.normal(0.0, 1.0, size=(config.num_pixels, d)) / np.sqrt(d)
    half = d // 2
    w = PARTIAL_VIEW_WEIGHT
    masks = {
        "rgb": np.ones(d),
        "sketch": np.where(np.arange(d) < half, 1.0, w),
        "infrared": np.where(np.arange(d) < half, w, 1.0),
    }
    return {m: base * masks[m] for m in ("rgb", "sketch", "infrared")}


def _tokens_from_latent(z: np.ndarray, config: SyntheticConfig) -> np.ndarray:
    vals = z[: config.text_tokens_per_sample]
    bins = np.clip(((vals + 2.0) / 4.0 * TEXT_BINS).astype(np.int64), 0, TEXT_BINS - 1)
    return np.arange(config.text_tokens_per_sample, dtype=np.int64) * TEXT_BINS + bins


def generate(config: SyntheticConfig):
    """Build disjoint train/test splits; fully determined by the config."""
    latents = identity_latents(config)
    mixes = modality_transforms(config)
    rng = np.random.default_rng(config.seed + 1)

    ids = np.arange(config.num_identities)
    train_ids = set(ids[: config.num_identities // 2].tolist())

    train, test = [], []
    for ident in ids:
        z = latents[ident]
        target = train if ident in train_ids else test
        for modality in MODALITIES:
            for _ in range(config.samples_per_identity_per_modality):
                noise = rng.normal(0.0, 1.0, size=config.latent_dim) * config.noise_scale
                if modality == "text":
                    payload = _tokens_from_latent(z + noise, config)
                else:
                    payload = (mixes[modality] @ (z + noise)).reshape(config.pixel_grid)
                target.append(Sample(int(ident), modality, payload))
    return (DatasetSplit(train, "train", config),
            DatasetSplit(test, "test", config))


# ---------------------------------------------------------------------------
# binary container


def _config_json(config: SyntheticConfig) -> bytes:
    d = asdict(config)
    d["pixel_grid"] = list(d["pixel_grid"])
    return json.dumps(d, sort_keys=True).encode()


def _config_from_json(raw: bytes) -> SyntheticConfig:
    d = json.loads(raw)
    d["pixel_grid"] = tuple(d["pixel_grid"])
    return SyntheticConfig(**d)


def save(split: DatasetSplit, path) -> None:
    cfg_json = _config_json(split.config)
    tag = split.split_tag.encode()
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(tag)), tag,
             struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<I", len(split.samples))]
    for s in split.samples:
        kind = 1 if s.modality == "text" else 0
        payload = s.payload.astype(np.int64 if kind else np.float64)
        raw = payload.tobytes()
        parts.append(struct.pack("<IBBB", s.identity, _MOD_CODE[s.modality],
                                 kind, payload.ndim))
        parts.append(struct.pack(f"<{payload.ndim}I", *payload.shape))
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncationError(f"file truncated at byte {self.pos}")
        chunk = self.raw[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> DatasetSplit:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if len(rd.raw) < len(MAGIC) or rd.take(len(MAGIC)) != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic bytes")
    version, tag_len = rd.unpack("<HH")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, "
                                   f"expected {FORMAT_VERSION}")
    tag = rd.take(tag_len).decode()
    (cfg_len,) = rd.unpack("<I")
    config = _config_from_json(rd.take(cfg_len))
    (count,) = rd.unpack("<I")
    samples = []
    for _ in range(count):
        identity, mod_code, kind, ndim = rd.unpack("<IBBB")
        shape = rd.unpack(f"<{ndim}I")
        (nbytes,) = rd.unpack("<I")
        dtype = np.int64 if kind else np.float64
        payload = np.frombuffer(rd.take(nbytes), dtype=dtype).reshape(shape).copy()
        samples.append(Sample(identity, MODALITIES[mod_code], payload))
    return DatasetSplit(samples, tag, config)
