"""Training loop: identity-balanced batches, Adam on the trainable partition,
cosine learning-rate decay, gradient clipping and versioned checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSplit, MODALITIES
from .encoder import EncoderConfig
from .fusion import MODES, ModalityBundle, subset_bundle
from .losses import SDMConfig, sdm_sum, total_loss
from .model import ModelConfig, RetrievalModel

CHECKPOINT_MAGIC = b"FLXR"
CHECKPOINT_VERSION = 1


class TrainError(Exception):
    pass


class NonFiniteLossError(TrainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_identities: int = 4
    learning_rate: float = 3.3e-3
    lam: float = 0.5
    clip_norm: float = 5.0
    seed: int = 0
    sdm: SDMConfig = field(default_factory=SDMConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_identities < 1 or self.learning_rate <= 0:
            raise TrainError("epochs, batch size and learning rate must be positive")


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (p.grad - m)
            v += (1.0 - self.beta2) * (p.grad * p.grad - v)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for n in self.m:
            self.m[n] = np.asarray(state["m"][n], dtype=np.float64).copy()
            self.v[n] = np.asarray(state["v"][n], dtype=np.float64).copy()


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def clip_gradients(params: dict, max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def assemble_batches(split: DatasetSplit, batch_identities: int, rng):
    """Identity-balanced batches: one random sample per modality per identity.

    The last partial batch is dropped.
    """
    groups = split.by_identity_modality()
    identities = split.identities()
    for ident in identities:
        for modality in MODALITIES:
            if (ident, modality) not in groups:
                raise TrainError(f"identity {ident} lacks a {modality} sample")
    order = np.array(identities)
    rng.shuffle(order)
    batches = []
    for start in range(0, len(order) - batch_identities + 1, batch_identities):
        chunk = order[start: start + batch_identities]
        batch = []
        for ident in chunk:
            picks = {m: groups[(int(ident), m)][rng.integers(0, len(groups[(int(ident), m)]))]
                     for m in MODALITIES}
            batch.append((int(ident), picks))
        batches.append(batch)
    return batches


def _batch_loss(model: RetrievalModel, batch, cfg: TrainConfig):
    """Forward the batch; returns (total, sdm, ada) scalar tensors."""
    labels = [ident for ident, _ in batch]
    gallery_feats = []
    mode_feats = {m: [] for m in MODES}
    ada_terms = []
    for _, picks in batch:
        seqs = {}
        for modality, sample in picks.items():
            seq, terms = model.encode_sample(sample)
            seqs[modality] = seq
            ada_terms.extend(terms)
        gallery_feats.append(seqs["rgb"].global_feature)
        bundle = ModalityBundle(sketch=seqs["sketch"].tokens,
                                infrared=seqs["infrared"].tokens,
                                text=seqs["text"].tokens)
        globals_by_mod = {m: seqs[m].global_feature
                          for m in ("sketch", "infrared", "text")}
        for mode in MODES:
            mode_feats[mode].append(
                model.fused_query(subset_bundle(bundle, mode), mode, globals_by_mod))
    gallery_mat = ad.stack_rows(gallery_feats)
    features = {m: ad.stack_rows(v) for m, v in mode_feats.items()}
    sdm = sdm_sum(features, gallery_mat, labels, cfg.sdm)
    ada = ad.meanop(ad.stack_rows([ad.reshape(t, (1,)) for t in ada_terms]))
    return total_loss(sdm, ada, cfg.lam), sdm, ada


def train_step(model: RetrievalModel, batch, optimizer: Adam, cfg: TrainConfig):
    optimizer.zero_grad()
    with ad.Tape():
        total, sdm, ada = _batch_loss(model, batch, cfg)
        loss_val = float(total.data)
        if not math.isfinite(loss_val):
            raise NonFiniteLossError(
                f"loss became non-finite (sdm={float(sdm.data)}, ada={float(ada.data)})")
        ad.backward(total)
    clip_gradients(optimizer.params, cfg.clip_norm)
    optimizer.step()
    return {"total": loss_val, "sdm": float(sdm.data), "ada": float(ada.data)}


def fit(model: RetrievalModel, split: DatasetSplit, cfg: TrainConfig,
        checkpoint_path=None, resume_from=None, stop_after=None):
    """Run the full loop; returns (history, final optimizer).

    History holds one record per epoch with the mean loss decomposition.
    ``stop_after`` halts early after that many epochs while keeping the
    learning-rate schedule of the full ``cfg.epochs`` run, so a checkpoint
    written there can be resumed to reproduce the uninterrupted run exactly.
    """
    optimizer = Adam(model.trainable_parameters(), cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    start_epoch = 0
    history = []
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        model.load_state_arrays(state["params"])
        optimizer.load_state(state["adam"])
        rng.bit_generator.state = state["rng_state"]
        start_epoch = state["epoch"]
        history = state["history"]

    end_epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    for epoch in range(start_epoch, end_epoch):
        optimizer.lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        batches = assemble_batches(split, cfg.batch_identities, rng)
        if not batches:
            raise TrainError(
                f"no full batch of {cfg.batch_identities} identities in split")
        sums = {"total": 0.0, "sdm": 0.0, "ada": 0.0}
        for batch in batches:
            rec = train_step(model, batch, optimizer, cfg)
            for k in sums:
                sums[k] += rec[k]
        record = {"epoch": epoch, "lr": optimizer.lr,
                  **{k: v / len(batches) for k, v in sums.items()}}
        history.append(record)

    if checkpoint_path is not None:
        save_checkpoint(model, optimizer, cfg, len(history), rng, history,
                        checkpoint_path)
    return history, optimizer


# ---------------------------------------------------------------------------
# checkpoint container (magic FLXR)


def _model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["encoder"]["patch_grid"] = list(d["encoder"]["patch_grid"])
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    enc = dict(d["encoder"])
    enc["patch_grid"] = tuple(enc["patch_grid"])
    rest = {k: v for k, v in d.items() if k != "encoder"}
    return ModelConfig(encoder=EncoderConfig(**enc), **rest)


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    sdm = SDMConfig(**d["sdm"])
    rest = {k: v for k, v in d.items() if k != "sdm"}
    return TrainConfig(sdm=sdm, **rest)


def save_checkpoint(model: RetrievalModel, optimizer: Adam, cfg: TrainConfig,
                    epoch: int, rng, history, path) -> None:
    params = model.state_arrays()
    adam_state = optimizer.state()
    arrays = {}
    arrays.update({f"param/{n}": a for n, a in params.items()})
    arrays.update({f"adam_m/{n}": a for n, a in adam_state["m"].items()})
    arrays.update({f"adam_v/{n}": a for n, a in adam_state["v"].items()})
    names = sorted(arrays)
    header = {
        "model_config": _model_config_dict(model.config),
        "train_config": _train_config_dict(cfg),
        "epoch": epoch,
        "adam_t": adam_state["t"],
        "rng_state": _jsonable_rng_state(rng.bit_generator.state),
        "history": history,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype=np.float64).tobytes())


def _jsonable_rng_state(state):
    if isinstance(state, dict):
        return {k: _jsonable_rng_state(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__ndarray__": state.tolist(), "dtype": str(state.dtype)}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def _rng_state_from_json(state):
    if isinstance(state, dict):
        if "__ndarray__" in state:
            return np.array(state["__ndarray__"], dtype=state["dtype"])
        return {k: _rng_state_from_json(v) for k, v in state.items()}
    return state


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise TrainError(f"{path}: not a checkpoint file (bad magic)")
        version, hdr_len = struct.unpack("<HI", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise TrainError(f"{path}: checkpoint version {version}, "
                             f"expected {CHECKPOINT_VERSION}")
        header = json.loads(fh.read(hdr_len))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise TrainError(f"{path}: truncated checkpoint")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    params = {n[len("param/"):]: a for n, a in arrays.items() if n.startswith("param/")}
    adam = {"t": header["adam_t"],
            "m": {n[len("adam_m/"):]: a for n, a in arrays.items() if n.startswith("adam_m/")},
            "v": {n[len("adam_v/"):]: a for n, a in arrays.items() if n.startswith("adam_v/")}}
    return {
        "model_config": model_config_from_dict(header["model_config"]),
        "train_config": train_config_from_dict(header["train_config"]),
        "epoch": header["epoch"],
        "params": params,
        "adam": adam,
        "rng_state": _rng_state_from_json(header["rng_state"]),
        "history": header["history"],
    }


def model_from_checkpoint(path) -> RetrievalModel:
    state = load_checkpoint(path)
    model = RetrievalModel(state["model_config"])
    model.load_state_arrays(state["params"])
    return model
