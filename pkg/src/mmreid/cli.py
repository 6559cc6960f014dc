"""Command-line entry point: data generation, training, evaluation,
ablations, sweeps and gradient checking.

Exit codes: 0 success, 2 config error, 3 io error, 4 numeric failure.
Errors additionally emit one machine-readable line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import ablate, data
from .autodiff import AutodiffError
from .config import ConfigError, RunConfig, write_atomic
from .evaluation import evaluate_modes
from .fusion import MODES, FusionError
from .gradcheck import run_all as run_gradchecks
from .losses import LossError
from .metrics import MetricError
from .model import RetrievalModel
from .train import (NonFiniteLossError, TrainError, fit, load_checkpoint,
                    model_from_checkpoint)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("mmreid")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_run_config(args) -> RunConfig:
    try:
        if args.config:
            return RunConfig.from_file(args.config, seed_override=args.seed)
        cfg = RunConfig()
        if args.seed is not None:
            cfg.values["seed"] = args.seed
        return cfg
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _dataset_path(out_dir, tag):
    return os.path.join(out_dir, f"{tag}.cirs")


def _load_split(path):
    try:
        return data.load(path)
    except (data.DatasetError, OSError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}", EXIT_IO) from exc


def _write(path, content):
    try:
        write_atomic(path, content)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc
    log.info("wrote %s", path)


def _echo_config(cfg: RunConfig, out_dir):
    _write(os.path.join(out_dir, "effective_config.cfg"),
           f"# config_hash = {cfg.hash()}\n" + cfg.effective_text())


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    train, test = data.generate(cfg.synthetic_config())
    for split, tag in ((train, "train"), (test, "test")):
        path = _dataset_path(out, tag)
        tmp = path + ".part"
        data.save(split, tmp)
        os.replace(tmp, path)
        log.info("wrote %s (%d samples)", path, len(split.samples))
    _echo_config(cfg, out)
    return EXIT_OK


def cmd_describe(args) -> int:
    split = _load_split(args.dataset)
    counts = split.counts()
    print(f"split={split.split_tag} identities={len(split.identities())} "
          f"samples={len(split.samples)}")
    for modality in data.MODALITIES:
        print(f"  {modality}: {counts.get(modality, 0)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    train_split = _load_split(args.train_data or _dataset_path(out, "train"))
    model = RetrievalModel(cfg.model_config())
    ckpt_path = os.path.join(out, "model.ckpt")
    history, _ = fit(model, train_split, cfg.train_config(),
                     checkpoint_path=ckpt_path, resume_from=args.resume)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["epoch", "lr", "total", "sdm", "ada", "config_hash"])
    for rec in history:
        w.writerow([rec["epoch"], repr(rec["lr"]), repr(rec["total"]),
                    repr(rec["sdm"]), repr(rec["ada"]), cfg.hash()])
    _write(os.path.join(out, "loss.csv"), buf.getvalue())
    runlog = "\n".join(json.dumps({**rec, "config_hash": cfg.hash()}, sort_keys=True)
                       for rec in history) + "\n"
    _write(os.path.join(out, "train_log.jsonl"), runlog)
    _echo_config(cfg, out)
    log.info("final loss %.6f over %d epochs", history[-1]["total"], len(history))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    split = _load_split(args.dataset or _dataset_path(out, "test"))
    try:
        model = model_from_checkpoint(args.checkpoint)
    except (TrainError, OSError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_IO) from exc
    if model.config.encoder.patch_grid != split.config.pixel_grid:
        raise CliError(
            f"checkpoint patch grid {model.config.encoder.patch_grid} disagrees "
            f"with dataset pixel grid {split.config.pixel_grid}", EXIT_CONFIG)
    modes = args.modes.split(",") if args.modes else list(MODES)
    for mode in modes:
        if mode not in MODES:
            raise CliError(f"unknown mode {mode!r}", EXIT_CONFIG)
    report = evaluate_modes(model, split, modes, seed=cfg["seed"],
                            config_hash=cfg.hash())
    _write(os.path.join(out, "report.jsonl"), report.to_jsonl())
    _write(os.path.join(out, "report.csv"), report.to_csv())
    for r in report.results:
        print(f"{r.mode}: R@1={r.r1:.4f} R@5={r.r5:.4f} R@10={r.r10:.4f} "
              f"mAP={r.map:.4f} mINP={r.minp:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    train_split = _load_split(args.train_data or _dataset_path(out, "train"))
    test_split = _load_split(args.test_data or _dataset_path(out, "test"))
    runner = {"components": ablate.run_component_ablation,
              "routing": ablate.run_routing_ablation,
              "fusion": ablate.run_fusion_ablation}[args.kind]
    _, csv_text = runner(cfg, train_split, test_split)
    path = os.path.join(out, f"ablation_{args.kind}.csv")
    _write(path, csv_text)
    print(csv_text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    train_split = _load_split(args.train_data or _dataset_path(out, "train"))
    test_split = _load_split(args.test_data or _dataset_path(out, "test"))
    runner = {"experts": ablate.run_expert_sweep,
              "threshold": ablate.run_threshold_sweep}[args.kind]
    _, csv_text = runner(cfg, train_split, test_split)
    path = os.path.join(out, f"sweep_{args.kind}.csv")
    _write(path, csv_text)
    print(csv_text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    reports = run_gradchecks(seed=cfg["seed"])
    all_pass = True
    for name, rep in sorted(reports.items()):
        status = "pass" if rep.passed else "FAIL"
        print(f"{status} {name}: max_rel_err={rep.worst:.3e} tol={rep.tol:g}")
        all_pass &= rep.passed
    if not all_pass:
        raise CliError("gradient check failed", EXIT_NUMERIC)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmreid",
                                description="multimodal retrieval toy benchmark")
    p.add_argument("--config", help="path to key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write train/test dataset files")

    sp = sub.add_parser("describe", help="print dataset counts")
    sp.add_argument("dataset")

    sp = sub.add_parser("train", help="train a model, write checkpoint + loss CSV")
    sp.add_argument("--train-data")
    sp.add_argument("--resume", help="checkpoint to resume from")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--modes", help="comma-separated retrieval modes")

    sp = sub.add_parser("ablate", help="run an ablation table")
    sp.add_argument("kind", choices=["components", "routing", "fusion"])
    sp.add_argument("--train-data")
    sp.add_argument("--test-data")

    sp = sub.add_parser("sweep", help="run a hyper-parameter sweep")
    sp.add_argument("kind", choices=["experts", "threshold"])
    sp.add_argument("--train-data")
    sp.add_argument("--test-data")

    sub.add_parser("gradcheck", help="finite-difference gradient checks")
    return p


_COMMANDS = {
    "generate": cmd_generate,
    "describe": cmd_describe,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MMREID_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: code={exc.code} message={exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: code={EXIT_CONFIG} message={exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: code={EXIT_IO} message={exc}", file=sys.stderr)
        return EXIT_IO
    except (AutodiffError, NonFiniteLossError, LossError, MetricError,
            FusionError, TrainError, data.DatasetError) as exc:
        print(f"error: code={EXIT_NUMERIC} message={exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
