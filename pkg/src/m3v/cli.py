"""Command line pipeline: gen-data, train, calibrate, eval, decide, and
grad-check subcommands, all deterministic given a config and seed."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import policy as policy_mod
from . import training
from .data import (DataFormatError, GenConfig, generate_synthetic, load_jsonl,
                   save_jsonl, _parse_sample)
from .metrics import save_report
from .model import ViewScores, score
from .numerics import ShapeError, StateError
from .training import (CheckpointError, TrainConfig, TrainingError, evaluate,
                       grad_check_components, load_checkpoint, save_checkpoint,
                       train)

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

GRAD_CHECK_TOLERANCE = 1e-4


class CliError(ValueError):
    """User-facing command line or config problem."""


_GEN_KEYS = {f.name for f in dataclasses.fields(GenConfig)} - {"seed"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_POLICY_KEYS = {"svm_c", "svm_epochs", "align_grid"}
_POLICY_DEFAULTS = {"svm_c": 1.0, "svm_epochs": 200, "align_grid": 21}


def load_config(path: str | None, seed_flag: int | None) -> dict:
    """Merge defaults, the config file, and flag overrides.

    The file must be a JSON object with a top-level `seed` and optional
    `gen`, `train`, and `policy` sections; unknown keys anywhere are
    rejected before any work starts.
    """
    cfg = {"seed": None, "gen": {}, "train": {}, "policy": {}}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise CliError(f"config {path} is not valid JSON: {e.msg}") from e
        if not isinstance(raw, dict):
            raise CliError(f"config {path} must be a JSON object")
        unknown = set(raw) - {"seed", "gen", "train", "policy"}
        if unknown:
            raise CliError(f"config {path}: unknown top-level keys {sorted(unknown)}")
        for section, allowed in (("gen", _GEN_KEYS), ("train", _TRAIN_KEYS),
                                 ("policy", _POLICY_KEYS)):
            body = raw.get(section, {})
            if not isinstance(body, dict):
                raise CliError(f"config section {section!r} must be an object")
            bad = set(body) - allowed
            if bad:
                raise CliError(f"config section {section!r}: unknown keys {sorted(bad)}")
            cfg[section] = dict(body)
        cfg["seed"] = raw.get("seed")
    if seed_flag is not None:
        cfg["seed"] = int(seed_flag)
    if cfg["seed"] is None:
        raise CliError("a seed is required (config `seed` or --seed)")
    cfg["seed"] = int(cfg["seed"])
    return cfg


def _gen_config(cfg: dict) -> GenConfig:
    body = dict(cfg["gen"])
    if "n_samples" not in body:
        raise CliError("config gen.n_samples is required for gen-data")
    try:
        return GenConfig(seed=cfg["seed"], **body)
    except ValueError as e:
        raise CliError(f"invalid gen config: {e}") from e


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=cfg["seed"], **cfg["train"])
    except (ValueError, TypeError) as e:
        raise CliError(f"invalid train config: {e}") from e


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    gen = _gen_config(cfg)
    ds = generate_synthetic(gen)
    save_jsonl(ds, args.out)
    labels = ds.labels()
    flags = ds.misaligned_flags()
    print(f"wrote {args.out}: n={len(ds)} positive_fraction={labels.mean():.4f} "
          f"misaligned_fraction={flags.mean():.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    tcfg = _train_config(cfg)
    train_ds = load_jsonl(args.train)
    valid_ds = load_jsonl(args.valid)
    ckpt = train(tcfg, train_ds, valid_ds)
    save_checkpoint(ckpt, args.out)
    for h in ckpt.history:
        print(f"epoch {h.epoch}/{tcfg.epochs} l_total={h.l_total:.6f} "
              f"l_audio={h.l_audio:.6f} l_text={h.l_text:.6f} "
              f"l_multi={h.l_multi:.6f} l_contrastive={h.l_contrastive:.6f} "
              f"valid_{tcfg.valid_metric}={h.valid_metric:.6f}")
    pick = max if tcfg.valid_metric == "accuracy_multi" else min
    best = pick(h.valid_metric for h in ckpt.history)
    print(f"wrote {args.out}: best valid_{tcfg.valid_metric}={best:.6f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, args.seed)
    hyper = _POLICY_DEFAULTS | cfg["policy"]
    ckpt = load_checkpoint(args.ckpt)
    valid_ds = load_jsonl(args.valid)
    pa, pt = training.pooled_features(valid_ds)
    from .model import score_matrix
    scores = score_matrix(ckpt.params, pa, pt)
    labels = valid_ds.labels()
    svm = policy_mod.train_svm(scores, labels, c=hyper["svm_c"],
                               epochs=hyper["svm_epochs"], seed=cfg["seed"])
    thresholds = policy_mod.calibrate_thresholds(scores, labels, svm=svm,
                                                 align_grid=hyper["align_grid"])
    policy_mod.save_policy(args.out, thresholds, svm, provenance={
        "dataset_digest": valid_ds.digest(), "seed": cfg["seed"]})
    th = thresholds.to_dict()
    print("wrote {}: ".format(args.out)
          + " ".join(f"{k}={v:.4f}" for k, v in th.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_jsonl(args.data)
    thresholds = svm = None
    if args.policy is not None:
        thresholds, svm, _ = policy_mod.load_policy(args.policy)
    report = evaluate(ckpt, ds, thresholds=thresholds, svm=svm)
    save_report(report, args.out)
    print(report.format_table(), end="")
    return EXIT_OK


def cmd_decide(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    thresholds, svm, _ = policy_mod.load_policy(args.policy)
    with open(args.sample, "r", encoding="utf-8") as fh:
        line = fh.readline().strip()
    if not line:
        raise DataFormatError("sample file is empty", line=1)
    pair = _parse_sample(line, 1)
    s = score(pair, ckpt.params)
    d1 = policy_mod.policy1_decide(s, thresholds)
    d2 = policy_mod.policy2_decide(s, svm, thresholds.t_fusion)
    margin = svm.margin(s.as_vector())
    print(f"scores align={s.v_align:.6f} audio={s.v_audio:.6f} "
          f"text={s.v_text:.6f} multi={s.v_multi:.6f}")
    print(f"policy1 verdict={d1.verdict} branch={d1.branch}")
    print(f"policy2 verdict={d2.verdict} margin={margin:.6f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config, args.seed)
    tcfg = _train_config(cfg)
    gen = cfg["gen"]
    results = grad_check_components(
        audio_feat_dim=gen.get("audio_feat_dim", 32),
        text_feat_dim=gen.get("text_feat_dim", 24),
        seed=cfg["seed"], cfg=tcfg)
    worst = 0.0
    for name, err in results:
        status = "PASS" if err < GRAD_CHECK_TOLERANCE else "FAIL"
        print(f"component {name}: max_rel_err={err:.3e} {status}")
        worst = max(worst, err)
    if worst >= GRAD_CHECK_TOLERANCE:
        print(f"gradient check failed: worst {worst:.3e} >= {GRAD_CHECK_TOLERANCE}")
        return EXIT_INTERNAL
    print(f"gradient check passed: worst {worst:.3e}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="m3v",
                     description="multi-view device-directed speech detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write a checkpoint")
    common(p)
    p.add_argument("--train", required=True, help="training JSONL")
    p.add_argument("--valid", required=True, help="validation JSONL")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit thresholds and the fusion SVM")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decide", help="score and decide one utterance")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--sample", required=True, help="file with one JSONL utterance")
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    common(p)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (StateError, TrainingError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except ShapeError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (CliError, DataFormatError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


def entrypoint() -> None:
    sys.exit(main())
