"""Ablation and sweep drivers: component table, routing and fusion strategy
comparisons, and expert-count / threshold sweeps. Each emits CSV rows with
the per-row effective config hash."""

from __future__ import annotations

import csv
import io

import numpy as np

from .config import RunConfig
from .evaluation import evaluate_modes
from .fusion import MODES
from .model import RetrievalModel
from .train import fit

EXPERT_SWEEP = (2, 4, 6, 8, 10)
THRESHOLD_SWEEP = tuple(round(0.1 * i, 1) for i in range(1, 10))

COMPONENT_ROWS = (
    ("0", "zero-shot"),
    ("1", "+mlp-adapter"),
    ("2", "+aea-moe(no-al)"),
    ("3", "+aea-moe(al)"),
    ("4", "+cmqf(no-lef)"),
    ("5", "+cmqf(lef)"),
)


def _row_config(base: RunConfig, overrides: dict) -> RunConfig:
    cfg = RunConfig(dict(base.values))
    cfg.values.update(overrides)
    return cfg


def _zero_adapters(model: RetrievalModel) -> None:
    # silence the adapter path so only the frozen backbone remains
    for layers in (model.visual_moe, model.text_moe):
        for layer in layers:
            for expert in layer.experts:
                expert.up.data[:] = 0.0
                expert.up_bias.data[:] = 0.0


def _train_eval(run_cfg: RunConfig, train_split, test_split,
                model_overrides: dict, train_overrides: dict,
                trained: bool = True):
    model = RetrievalModel(run_cfg.model_config(**model_overrides))
    if trained:
        fit(model, train_split, run_cfg.train_config(**train_overrides))
    else:
        _zero_adapters(model)
    return model, evaluate_modes(model, test_split, seed=run_cfg["seed"],
                                 config_hash=run_cfg.hash())


def component_row_settings():
    """Per-row (model_overrides, train_overrides, trained) of the component table."""
    return {
        "0": ({"fusion": "mean"}, {}, False),
        "1": ({"fusion": "mean", "num_experts": 1, "router": "soft"}, {"lam": 0.0}, True),
        "2": ({"fusion": "mean"}, {"lam": 0.0}, True),
        "3": ({"fusion": "mean"}, {}, True),
        "4": ({"use_lef": False}, {}, True),
        "5": ({}, {}, True),
    }


def run_component_ablation(run_cfg: RunConfig, train_split, test_split):
    settings = component_row_settings()
    rows = []
    for row_no, label in COMPONENT_ROWS:
        model_ov, train_ov, trained = settings[row_no]
        row_cfg = _row_config(run_cfg, {
            "fusion": model_ov.get("fusion", run_cfg["fusion"]),
            "moe.num_experts": model_ov.get("num_experts", run_cfg["moe.num_experts"]),
            "moe.router": model_ov.get("router", run_cfg["moe.router"]),
            "lef.enabled": model_ov.get("use_lef", run_cfg["lef.enabled"]),
            "train.lambda": train_ov.get("lam", run_cfg["train.lambda"]),
        })
        _, report = _train_eval(row_cfg, train_split, test_split,
                                model_ov, train_ov, trained)
        rows.append({"no": row_no, "label": label, "report": report,
                     "config_hash": row_cfg.hash()})
    return rows, _table_csv(rows, key="no", label_col="label")


def run_routing_ablation(run_cfg: RunConfig, train_split, test_split):
    rows = []
    for router in ("topk", "soft", "hash", "adaptive"):
        row_cfg = _row_config(run_cfg, {"moe.router": router})
        _, report = _train_eval(row_cfg, train_split, test_split,
                                {"router": router}, {})
        rows.append({"label": router, "report": report,
                     "config_hash": row_cfg.hash()})
    return rows, _table_csv(rows)


def run_fusion_ablation(run_cfg: RunConfig, train_split, test_split):
    rows = []
    for fusion in ("concat", "sum", "hierarchical", "cmqf"):
        row_cfg = _row_config(run_cfg, {"fusion": fusion})
        _, report = _train_eval(row_cfg, train_split, test_split,
                                {"fusion": fusion}, {})
        rows.append({"label": fusion, "report": report,
                     "config_hash": row_cfg.hash()})
    return rows, _table_csv(rows)


def run_expert_sweep(run_cfg: RunConfig, train_split, test_split):
    rows = []
    for n in EXPERT_SWEEP:
        row_cfg = _row_config(run_cfg, {"moe.num_experts": n})
        _, report = _train_eval(row_cfg, train_split, test_split,
                                {"num_experts": n}, {})
        rows.append({"label": str(n), "report": report,
                     "config_hash": row_cfg.hash()})
    return rows, _sweep_csv(rows, "num_experts")


def run_threshold_sweep(run_cfg: RunConfig, train_split, test_split):
    rows = []
    for tau in THRESHOLD_SWEEP:
        row_cfg = _row_config(run_cfg, {"moe.threshold": tau})
        _, report = _train_eval(row_cfg, train_split, test_split,
                                {"threshold": tau}, {})
        rows.append({"label": repr(tau), "report": report,
                     "config_hash": row_cfg.hash()})
    return rows, _sweep_csv(rows, "threshold")


def _table_csv(rows, key=None, label_col="method") -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    header = ([key] if key else []) + [label_col] + list(MODES) + ["avg_r1", "config_hash"]
    w.writerow(header)
    for r in rows:
        rep = r["report"]
        cells = ([r["no"]] if key else []) + [r["label"]]
        cells += [repr(rep.result_for(m).r1) for m in MODES]
        cells += [repr(rep.avg_r1), r["config_hash"]]
        w.writerow(cells)
    return buf.getvalue()


def _sweep_csv(rows, param_name: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow([param_name, "avg_r1", "avg_map", "config_hash"])
    for r in rows:
        rep = r["report"]
        avg_map = float(np.mean([x.map for x in rep.results]))
        w.writerow([r["label"], repr(rep.avg_r1), repr(avg_map), r["config_hash"]])
    return buf.getvalue()
