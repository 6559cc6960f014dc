"""Central-difference gradient checks for every differentiable subsystem.

Used both by the ``gradcheck`` CLI command and the acceptance suite: each
check builds a small seeded problem, runs the tape gradients against
central finite differences (step 1e-6) and reports the max relative error.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import CheckReport, Tensor, grad_check
from .data import SyntheticConfig, generate
from .encoder import EncoderConfig
from .fusion import FusionBlockParams, cmqf_fuse
from .losses import SDMConfig, sdm_bidirectional
from .model import ModelConfig, RetrievalModel
from .moe import AEAMoELayer, ExpertAdapter, GatingNetwork, moe_forward
from .train import TrainConfig, _batch_loss, assemble_batches

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-4


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def check_primitives(seed: int = 0) -> dict:
    """One scalar-valued probe per primitive operation."""
    rng = np.random.default_rng(seed)
    reports = {}

    def probe(name, params, fn):
        reports[name] = grad_check(fn, params, step=DEFAULT_STEP, tol=DEFAULT_TOL)

    a = _t(rng, 3, 4)
    b = _t(rng, 3, 4)
    m = _t(rng, 4, 5)
    v = _t(rng, 4)
    pos = Tensor(np.abs(rng.normal(1.0, 0.3, size=(3, 4))) + 0.5, requires_grad=True)

    probe("add", {"a": a, "b": b}, lambda: ad.sumop(ad.hadamard(ad.add(a, b), ad.add(a, b))))
    probe("add_bias", {"a": a, "v": v}, lambda: ad.sumop(ad.hadamard(ad.add(a, v), ad.add(a, v))))
    probe("sub", {"a": a, "b": b}, lambda: ad.sumop(ad.hadamard(ad.sub(a, b), ad.sub(a, b))))
    probe("hadamard", {"a": a, "b": b}, lambda: ad.sumop(ad.hadamard(a, b)))
    probe("matmul", {"a": a, "m": m}, lambda: ad.sumop(ad.hadamard(ad.matmul(a, m), ad.matmul(a, m))))
    probe("transpose", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.transpose(a), ad.transpose(a))))
    probe("scale", {"a": a}, lambda: ad.sumop(ad.scale(ad.hadamard(a, a), 2.5)))
    probe("exp", {"a": a}, lambda: ad.sumop(ad.exp(ad.scale(a, 0.3))))
    probe("log", {"p": pos}, lambda: ad.sumop(ad.log(pos)))
    probe("pow", {"p": pos}, lambda: ad.sumop(ad.powop(pos, -0.5)))
    probe("relu", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.relu(a), ad.relu(a))))
    probe("softmax", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.softmax(a, axis=1), b)))
    probe("sum_axis", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.sumop(a, axis=0), ad.sumop(a, axis=0))))
    probe("mean_axis", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.meanop(a, axis=1), ad.meanop(a, axis=1))))
    probe("concat", {"a": a, "b": b}, lambda: ad.sumop(ad.hadamard(ad.concat([a, b], axis=0), ad.concat([a, b], axis=0))))
    probe("reshape", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.reshape(a, (4, 3)), ad.reshape(a, (4, 3)))))
    probe("take_row", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.take_row(a, 1), ad.take_row(a, 1))))
    probe("take_column", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.take_column(a, 2), ad.take_column(a, 2))))
    probe("slice_cols", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.slice_cols(a, 1, 3), ad.slice_cols(a, 1, 3))))
    probe("pad_rows", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.pad_rows(a, 5), ad.pad_rows(a, 5))))
    probe("scale_rows", {"a": a}, lambda: ad.sumop(ad.scale_rows(a, ad.take_column(a, 0))))
    probe("layer_norm", {"a": a, "v": v},
          lambda: ad.sumop(ad.hadamard(ad.layer_norm(a, v, ad.neg(v)), b)))
    probe("l2_normalize", {"a": a}, lambda: ad.sumop(ad.hadamard(ad.l2_normalize_rows(a), b)))
    table = _t(rng, 6, 4)
    probe("gather_rows", {"table": table},
          lambda: ad.sumop(ad.hadamard(ad.gather_rows(table, [0, 2, 2, 5]),
                                       ad.gather_rows(table, [0, 2, 2, 5]))))
    return reports


def _soft_moe_layer(rng, d=6, n=3, b=2) -> AEAMoELayer:
    gate = GatingNetwork(weights=_t(rng, n, d, scale=0.5))
    experts = [ExpertAdapter(down=_t(rng, d, b, scale=0.5), down_bias=_t(rng, b, scale=0.1),
                             up=_t(rng, b, d, scale=0.5), up_bias=_t(rng, d, scale=0.1))
               for _ in range(n)]
    return AEAMoELayer(gate=gate, experts=experts, threshold=0.6, router_kind="soft")


def check_moe_soft(seed: int = 1) -> CheckReport:
    rng = np.random.default_rng(seed)
    layer = _soft_moe_layer(rng)
    x = _t(rng, 4, 6, scale=0.5)
    target = Tensor(rng.normal(size=(4, 6)))

    def fn():
        y, ent = moe_forward(x, layer)
        return ad.add(ad.sumop(ad.hadamard(y, target)), ent)

    params = {"x": x, "gate": layer.gate.weights,
              "e0.down": layer.experts[0].down, "e0.up": layer.experts[0].up,
              "e1.down_bias": layer.experts[1].down_bias,
              "e2.up_bias": layer.experts[2].up_bias}
    return grad_check(fn, params, step=DEFAULT_STEP, tol=DEFAULT_TOL)


def check_cmqf(seed: int = 2) -> CheckReport:
    rng = np.random.default_rng(seed)
    d = 8
    params = FusionBlockParams.create(d, num_heads=2, seed=seed, scale=0.3)
    x_s = _t(rng, 3, d, scale=0.5)
    x_ir = _t(rng, 2, d, scale=0.5)
    x_t = _t(rng, 4, d, scale=0.5)
    target = Tensor(rng.normal(size=(d,)))

    def fn():
        f = cmqf_fuse((x_s, x_ir, x_t), params)
        return ad.sumop(ad.hadamard(f, target))

    check = {"x_s": x_s, "x_ir": x_ir, "x_t": x_t,
             "tl_s.wq": params.tl_s.wq, "tl_ir.wk": params.tl_ir.wk,
             "tl_t.wv": params.tl_t.wv, "tl_fu.wo": params.tl_fu.wo}
    return grad_check(fn, check, step=DEFAULT_STEP, tol=DEFAULT_TOL)


def check_sdm(seed: int = 3) -> CheckReport:
    rng = np.random.default_rng(seed)
    q = _t(rng, 4, 6)
    g = _t(rng, 4, 6)
    labels = [0, 0, 1, 2]

    # temperature 0.2: the sharp default saturates the softmax and pushes
    # true gradients below central-difference roundoff at step 1e-6
    def fn():
        return sdm_bidirectional(q, g, labels, SDMConfig(temperature=0.2))

    return grad_check(fn, {"queries": q, "galleries": g},
                      step=DEFAULT_STEP, tol=DEFAULT_TOL)


def check_end_to_end(seed: int = 4) -> CheckReport:
    """Total objective on a 4-identity micro-batch, sampled parameter set."""
    enc = EncoderConfig(model_dim=8, num_blocks=1, num_heads=2, patch_grid=(2, 2),
                        vocab_size=64, max_text_len=6, freeze_seed=seed)
    model = RetrievalModel(ModelConfig(encoder=enc, num_experts=3, router="soft",
                                       init_seed=seed))
    data_cfg = SyntheticConfig(num_identities=8, samples_per_identity_per_modality=1,
                               latent_dim=4, noise_scale=0.05, pixel_grid=(2, 2),
                               text_tokens_per_sample=2, seed=seed)
    train_split, _ = generate(data_cfg)
    # sharpen the fusion attention: with near-zero query/key projections the
    # wq/wk gradients are second-order small and drown in central-difference
    # roundoff at the fixed 1e-6 step
    fp = model.fusion_params
    for block in (fp.tl_s, fp.tl_ir, fp.tl_t, fp.tl_fu):
        block.wq.data *= 8.0
        block.wk.data *= 8.0
    cfg = TrainConfig(epochs=1, batch_identities=4, lam=0.5,
                      sdm=SDMConfig(temperature=0.2))
    batch = assemble_batches(train_split, 4, np.random.default_rng(seed))[0]

    def fn():
        total, _, _ = _batch_loss(model, batch, cfg)
        return total

    trainable = model.trainable_parameters()
    sampled = {name: trainable[name] for name in [
        "visual.moe0.gate",
        "visual.moe0.expert0.down",
        "text.moe0.expert1.up_bias",
        "fusion.tl_s.wq",
        "fusion.tl_fu.wo",
        "lef.sketch",
    ]}
    return grad_check(fn, sampled, step=DEFAULT_STEP, tol=DEFAULT_TOL)


def run_all(seed: int = 0) -> dict:
    reports = {}
    for name, rep in check_primitives(seed).items():
        reports[f"primitive/{name}"] = rep
    reports["moe_forward/soft"] = check_moe_soft(seed + 1)
    reports["cmqf_fuse"] = check_cmqf(seed + 2)
    reports["sdm_bidirectional"] = check_sdm(seed + 3)
    reports["total_loss/end_to_end"] = check_end_to_end(seed + 4)
    return reports
