"""Command-line harness: dataset generation, training, evaluation, diagnostics,
and report aggregation, all reproducible from (config, seed).

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import tasks
from .config import SECTIONS, _coerce_section, echo_config, load_run_config
from .encoder import EncoderWeights, PromptSet
from .errors import ConfigError, PromptregError
from .metrics import alignment_terms, evaluate_run, harmonic_mean, report_to_csv, report_to_json
from .pipeline import build_model, run_training
from .regularizer import ModulatorParams
from .serialize import arrays_to_doc, doc_to_arrays
from .tasks import TaskSpec
from .training import TrainConfig, _stream, draw_augmentation, split_episode
from . import diagnose as diag

CHECKPOINT_VERSION = 1


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _load_task_spec(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: not found") from e
    return _coerce_section(TaskSpec, doc, "task")


def cmd_gen_data(args):
    spec = _load_task_spec(args.spec)
    ds = tasks.generate(spec)
    tasks.save(ds, args.out)
    print(f"dataset digest: {ds.digest()}")
    return 0


def _write_checkpoint(path, config, prompts, phi, d_x):
    doc = {
        "version": CHECKPOINT_VERSION,
        "train_config": dataclasses.asdict(config),
        "d_x": d_x,
        "prompts": arrays_to_doc("prompt-set", {"theta_vis": prompts.theta_vis,
                                                "theta_txt": prompts.theta_txt}),
        "modulator": arrays_to_doc("modulator-params", phi.arrays()),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def _read_checkpoint(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: not found") from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    config = _coerce_section(TrainConfig, doc["train_config"], "train").validate()
    prompts_arrs = doc_to_arrays(doc["prompts"], kind="prompt-set")
    prompts = PromptSet(prompts_arrs["theta_vis"], prompts_arrs["theta_txt"])
    mod_arrs = doc_to_arrays(doc["modulator"], kind="modulator-params")
    phi = ModulatorParams(mod_arrs["w1"], mod_arrs["b1"], mod_arrs["w2"], mod_arrs["b2"])
    return config, prompts, phi, int(doc["d_x"])


def cmd_train(args):
    overrides = {}
    if args.regime:
        regime = {"loss-reg": "loss-plus-reg"}.get(args.regime, args.regime)
        overrides["train.regime"] = regime
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    task_spec, config = load_run_config(args.config, overrides)
    ds = tasks.load(args.data)
    os.makedirs(args.out, exist_ok=True)
    echo_config(os.path.join(args.out, "config.json"), task_spec, config)
    log_path = os.path.join(args.out, "trainlog.ndjson")
    result, weights, classes = run_training(ds, config, log_path=log_path)
    ckpt = os.path.join(args.out, "checkpoint.json")
    _write_checkpoint(ckpt, config, result.prompts, result.phi, ds.spec.d_x)
    print(f"checkpoint digest: {_file_digest(ckpt)}")
    return 0


def _rebuild_model(config, ds):
    weights, classes = build_model(ds, config)
    if weights.d_x != ds.spec.d_x:
        raise PromptregError(
            f"dimension mismatch: encoder d_x={weights.d_x}, dataset d_x={ds.spec.d_x}")
    return weights, classes


def cmd_eval(args):
    config, prompts, phi, d_x = _read_checkpoint(args.checkpoint)
    ds = tasks.load(args.data)
    if d_x != ds.spec.d_x:
        raise PromptregError(
            f"dimension mismatch: checkpoint d_x={d_x}, dataset d_x={ds.spec.d_x}")
    if prompts.d_p != config.d_p:
        raise PromptregError(
            f"dimension mismatch: prompts d_p={prompts.d_p}, config d_p={config.d_p}")
    if args.shift:
        ds = tasks.domain_shift(ds, args.shift)
    weights, classes = _rebuild_model(config, ds)
    row = evaluate_run(prompts, weights, classes, ds, config.tau)
    row["regime"] = config.regime
    row["seed"] = config.seed
    row["shift"] = args.shift or "none"
    report_to_json([row], args.out)
    report_to_csv([row], os.path.splitext(args.out)[0] + ".csv", include_aggregates=False)
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_diagnose(args):
    config, prompts, phi, d_x = _read_checkpoint(args.checkpoint)
    ds = tasks.load(args.data)
    if d_x != ds.spec.d_x:
        raise PromptregError(
            f"dimension mismatch: checkpoint d_x={d_x}, dataset d_x={ds.spec.d_x}")
    weights, classes = _rebuild_model(config, ds)
    candidate_ids = list(ds.base_classes)
    x, y = ds.features_and_labels("base-train")
    cfg = dataclasses.replace(config, regime="prometar", lam=None,
                              meta_gradient_mode="exact", force_gate_zero=False)
    episode = split_episode(x, y, _stream(cfg.seed, 0xD1A))
    draw = draw_augmentation(episode, cfg.mu, cfg.nu, _stream(cfg.seed, 0xD1B))

    if args.mode == "gradcheck":
        out = diag.gradcheck_outer(prompts, phi, episode, draw, weights, classes,
                                   candidate_ids, cfg)
        out["pass"] = bool(out["max_rel_err"] <= 1e-4
                           and out["max_abs_err_small"] <= 1e-8)
    elif args.mode == "taylor":
        out = {"ratios": diag.taylor_halving_ratios(prompts, x, y, weights, classes,
                                                    candidate_ids, cfg.tau)}
        for k, v in out["ratios"].items():
            print(f"taylor ratio {k}: {v:.3f}")
    else:  # alignment
        terms = alignment_terms(prompts, phi, episode, weights, classes,
                                candidate_ids, cfg)
        out = dataclasses.asdict(terms)
        out["halving_ratios"] = diag.alignment_halving_ratios(
            prompts, phi, episode, weights, classes, candidate_ids, cfg)
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
    if args.mode == "gradcheck":
        print(f"gradcheck max rel err: {out['max_rel_err']:.3e} "
              f"(worst theta coord {out['theta']['worst_coord']}, "
              f"phi coord {out['phi']['worst_coord']})")
        if not out["pass"]:
            raise PromptregError("gradcheck failed: autodiff and finite differences disagree")
    return 0


def cmd_report(args):
    rows = []
    for run_dir in sorted(args.runs):
        path = os.path.join(run_dir, "report.json") if os.path.isdir(run_dir) else run_dir
        try:
            with open(path) as fh:
                doc = json.load(fh)
            rows.extend(doc["rows"])
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise PromptregError(f"invalid report at {path}: {e}") from e
    for r in rows:
        if r.get("base_acc") and r.get("new_acc"):
            expect = harmonic_mean(r["base_acc"], r["new_acc"])
            if r.get("harmonic_mean") is not None and abs(expect - r["harmonic_mean"]) > 0.01:
                raise PromptregError(f"inconsistent harmonic mean in row {r}")
    report_to_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="promptreg",
                                     description="meta-regularized prompt tuning harness")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train prompts under a regime")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--regime", choices=["plain", "loss-reg", "loss-plus-reg", "prometar"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shift", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("diagnose", help="gradient/scaling/alignment diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=["gradcheck", "taylor", "alignment"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = subs.add_parser("report", help="merge run reports into one summary table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PromptregError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
