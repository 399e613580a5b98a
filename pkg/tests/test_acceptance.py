"""Acceptance gate: the eight package-level criteria.

Each test prints a one-line summary of the measured quantities so a release
run (`pytest -v -rP tests/test_acceptance.py`) documents the margins, not just
pass/fail.  Tolerances are pinned here and nowhere else.
"""

import dataclasses

import numpy as np
import pytest

import promptreg as pr
from promptreg import autodiff as ad
from promptreg.diagnose import (
    alignment_halving_ratios,
    gradcheck_outer,
    taylor_halving_ratios,
)
from promptreg.encoder import PromptSet
from promptreg.metrics import evaluate_run, harmonic_mean, task_overfitting_score
from promptreg.pipeline import benchmark_task_spec, benchmark_train_config
from promptreg.regularizer import regularizer_value
from promptreg.training import TrainConfig, draw_augmentation, mixed_labels, split_episode

BENCHMARK_SEEDS = range(10)
REGIMES = ("plain", "loss-plus-reg", "prometar")


# -- criterion 1: harmonic-mean reproduction --------------------------------

@pytest.mark.parametrize("base,new,expected", [
    (82.51, 73.36, 77.66),
    (84.39, 76.93, 80.49),
])
def test_criterion_1_harmonic_mean(base, new, expected):
    got = harmonic_mean(base, new)
    print(f"criterion 1: H({base}, {new}) = {got:.4f} (expected {expected})")
    assert got == pytest.approx(expected, abs=0.01)


# -- criterion 2: task-overfitting-score reproduction -----------------------

TOS_TABLE = [
    # name, tuned base/new, zero-shot base/new, expected score
    ("EuroSAT", 92.64, 63.33, 56.48, 64.05, 36.88),
    ("DTD", 80.67, 55.31, 53.24, 59.90, 32.02),
    ("Flowers", 96.17, 73.64, 72.08, 77.80, 28.25),
    ("Food101", 90.53, 91.66, 90.10, 91.22, -0.01),
    ("Caltech101", 98.28, 93.65, 96.84, 94.00, 1.79),
    ("ImageNet", 77.39, 70.04, 72.43, 68.14, 3.06),
]


@pytest.mark.parametrize("name,b,n,b0,n0,expected", TOS_TABLE)
def test_criterion_2_task_overfitting_score(name, b, n, b0, n0, expected):
    got = task_overfitting_score(b, n, b0, n0)
    print(f"criterion 2: tos[{name}] = {got:.4f} (expected {expected})")
    assert got == pytest.approx(expected, abs=0.01)


# -- criterion 3: meta-gradient exactness -----------------------------------

def test_criterion_3_meta_gradient_matches_finite_differences(small_stack,
                                                              small_episode):
    s = small_stack
    episode, draw = small_episode
    n_params = s["prompts"].n_params + s["phi"].flat().size
    assert n_params <= 64
    report = gradcheck_outer(s["prompts"], s["phi"], episode, draw, s["weights"],
                             s["classes"], s["candidate_ids"], s["config"], h=1e-5)
    print(f"criterion 3: {n_params} params, max rel err {report['max_rel_err']:.3e}, "
          f"max abs err (small coords) {report['max_abs_err_small']:.3e}")
    assert report["max_rel_err"] <= 1e-4
    assert report["max_abs_err_small"] <= 1e-8


# -- criterion 4: Taylor / alignment scaling --------------------------------

def test_criterion_4_taylor_halving_ratios(small_stack):
    s = small_stack
    ratios = taylor_halving_ratios(s["prompts"], s["x"], s["y"], s["weights"],
                                   s["classes"], s["candidate_ids"], s["config"].tau,
                                   alphas=(1e-2, 5e-3), n_directions=20, seed=0)
    print(f"criterion 4a: taylor halving ratios {ratios}")
    for alpha, ratio in ratios.items():
        assert 3.5 <= ratio <= 4.5, f"ratio at {alpha} outside [3.5, 4.5]"


def test_criterion_4_alignment_residual_scaling(small_stack, small_episode):
    s = small_stack
    episode, _ = small_episode
    ratios = alignment_halving_ratios(s["prompts"], s["phi"], episode, s["weights"],
                                      s["classes"], s["candidate_ids"], s["config"],
                                      alphas=(2e-3, 1e-3))
    print(f"criterion 4b: alignment residual halving ratios {ratios}")
    for alpha, ratio in ratios.items():
        assert 3.5 <= ratio <= 4.5, f"ratio at {alpha} outside [3.5, 4.5]"


# -- criterion 5: reduction identities --------------------------------------

def _train_tiny(dataset, **kw):
    cfg = TrainConfig(**{"epochs": 4, "alpha": 0.01, "beta": 0.01,
                         "lr_conv": 0.01, "seed": 2, **kw}).validate()
    result, weights, classes = pr.run_training(dataset, cfg)
    return result


def test_criterion_5a_prometar_reduces_to_plain(tiny_dataset):
    plain = _train_tiny(tiny_dataset, regime="plain")
    reduced = _train_tiny(tiny_dataset, regime="prometar", alpha=0.0,
                          force_gate_zero=True)
    identical = reduced.prompts.digest() == plain.prompts.digest()
    print(f"criterion 5a: prometar(alpha=0, gate=0) == plain: {identical}")
    assert identical
    assert [r["outer_loss"] for r in reduced.log] == \
        [r["outer_loss"] for r in plain.log]


def test_criterion_5b_loss_plus_reg_reduces_to_plain(tiny_dataset):
    plain = _train_tiny(tiny_dataset, regime="plain")
    reduced = _train_tiny(tiny_dataset, regime="loss-plus-reg", lam=0.0)
    identical = reduced.prompts.digest() == plain.prompts.digest()
    print(f"criterion 5b: loss-plus-reg(lambda=0) == plain: {identical}")
    assert identical


def test_criterion_5c_reference_prompts(tiny_dataset):
    cfg = TrainConfig(seed=0).validate()
    weights, classes = pr.build_model(tiny_dataset, cfg)
    ref = PromptSet.reference(cfg.d_p)
    x, _ = tiny_dataset.features_and_labels("base-train")
    r = regularizer_value(ref, x, weights, classes, tiny_dataset.base_classes)
    n_entries = weights.d_e * (x.shape[1] + len(tiny_dataset.base_classes))
    bound = np.sqrt(ad.SMOOTH_ABS_EPS) * n_entries
    row = evaluate_run(ref, weights, classes, tiny_dataset)
    print(f"criterion 5c: R(reference) = {r:.3e} (bound {bound:.3e}), "
          f"tos = {row['tos']}")
    assert r <= bound + 1e-12
    assert row["base_acc"] == row["base_acc_zero_shot"]
    assert row["new_acc"] == row["new_acc_zero_shot"]
    assert row["tos"] == 0.0


# -- criteria 6 and 8: directional benchmark and domain shifts --------------

@pytest.fixture(scope="module")
def benchmark_runs():
    """Train all regimes over the benchmark seeds once; share across criteria."""
    runs = {regime: [] for regime in REGIMES}
    for seed in BENCHMARK_SEEDS:
        dataset = pr.generate(benchmark_task_spec(seed))
        for regime in REGIMES:
            cfg = benchmark_train_config(regime, seed)
            result, weights, classes = pr.run_training(dataset, cfg)
            runs[regime].append((dataset, result.prompts, weights, classes, cfg))
    return runs


def test_criterion_6_directional_benchmark(benchmark_runs):
    new_acc = {}
    for regime in REGIMES:
        new_acc[regime] = np.array([
            evaluate_run(prompts, weights, classes, dataset, cfg.tau)["new_acc"]
            for dataset, prompts, weights, classes, cfg in benchmark_runs[regime]])
    pro, plain, lpr = (new_acc["prometar"], new_acc["plain"],
                       new_acc["loss-plus-reg"])
    wins = int((pro >= plain).sum())
    gap = float((pro - plain).mean())
    margin = float((pro - lpr).mean())
    print(f"criterion 6: new-class accuracy means plain={plain.mean():.2f} "
          f"loss-plus-reg={lpr.mean():.2f} prometar={pro.mean():.2f}; "
          f"wins {wins}/10, gap {gap:+.2f}, vs loss-plus-reg {margin:+.2f}")
    assert wins >= 7
    assert gap > 0.0
    assert pro.mean() >= lpr.mean()


def test_criterion_8_noise_shift_monotonicity(benchmark_runs):
    shifts = ("none", "noise:0.2", "noise:0.5")
    for regime in REGIMES:
        means = []
        for shift in shifts:
            accs = []
            for dataset, prompts, weights, classes, cfg in benchmark_runs[regime]:
                shifted = pr.domain_shift(dataset, shift)
                row = evaluate_run(prompts, weights, classes, shifted, cfg.tau)
                accs.append(harmonic_mean(row["base_acc"], row["new_acc"]))
            means.append(float(np.mean(accs)))
        print(f"criterion 8: {regime} mean accuracy under {shifts} = "
              f"{[f'{m:.2f}' for m in means]}")
        assert means[0] >= means[1] >= means[2], f"{regime} not monotone: {means}"


# -- criterion 7: invariant suites ------------------------------------------

def test_criterion_7_mixup_and_episode_invariants(tiny_dataset):
    cfg = TrainConfig(seed=6).validate()
    x, y = tiny_dataset.features_and_labels("base-train")
    rng = np.random.default_rng(3)
    episode = split_episode(x, y, rng)
    assert not set(episode.classes_tr) & set(episode.classes_val)
    draw = draw_augmentation(episode, cfg.mu, cfg.nu, rng)
    labels = mixed_labels(episode, draw, tiny_dataset.base_classes)
    assert np.all(labels >= 0) and np.allclose(labels.sum(axis=0), 1.0)
    endpoint = dataclasses.replace(draw, rho=np.ones_like(draw.rho))
    pure = mixed_labels(episode, endpoint, tiny_dataset.base_classes)
    assert np.allclose(pure.sum(axis=0), 1.0) and set(np.unique(pure)) == {0.0, 1.0}
    print("criterion 7: mixup/episode invariants hold")


def test_criterion_7_gate_and_frozen_weight_invariants(tiny_dataset):
    cfg = TrainConfig(regime="prometar", epochs=3, alpha=0.01, seed=7).validate()
    weights, classes = pr.build_model(tiny_dataset, cfg)
    before = (weights.digest(), classes.digest())
    result = pr.train(tiny_dataset, cfg, weights, classes)
    assert (weights.digest(), classes.digest()) == before
    gates = [(r["gate_min"], r["gate_max"]) for r in result.log
             if r["gate_min"] is not None]
    assert gates and all(0.0 < lo and hi < 1.0 for lo, hi in gates)
    print("criterion 7: gate bounds and frozen-weight conservation hold")


def test_criterion_7_dataset_roundtrip_and_cli_digests(tmp_path, capsys):
    import json
    from promptreg.cli import main
    from promptreg.tasks import load, save

    dataset = pr.generate(benchmark_task_spec(0))
    save(dataset, tmp_path / "ds")
    assert load(tmp_path / "ds") == dataset

    spec = tmp_path / "task.json"
    spec.write_text(json.dumps({"n_classes": 6, "d_x": 8, "shots": 4,
                                "test_shots": 5, "noise": 0.8, "seed": 1}))
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "task": json.loads(spec.read_text()),
        "train": {"regime": "prometar", "alpha": 0.005, "beta": 0.01,
                  "lr_conv": 0.02, "epochs": 2, "d_p": 2, "hidden": 4, "seed": 1},
    }))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    digests = []
    for name in ("r1", "r2"):
        assert main(["train", "--config", str(config), "--data",
                     str(tmp_path / "data"), "--out", str(tmp_path / name)]) == 0
        digests.append((tmp_path / name / "checkpoint.json").read_bytes())
    capsys.readouterr()
    assert digests[0] == digests[1]
    print("criterion 7: dataset round-trip and CLI reproducibility digests hold")
