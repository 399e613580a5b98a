"""Trainer tests: config validation, episode mechanics, mixup augmentation,
the inner/outer updates, and the regime reduction identities."""

import dataclasses
import json

import numpy as np
import pytest

import promptreg as pr
from promptreg import autodiff as ad
from promptreg.diagnose import gradcheck_outer, outer_gradients
from promptreg.encoder import PromptSet, encode_image, one_hot
from promptreg.errors import ConfigError, DataError
from promptreg.regularizer import ModulatorParams
from promptreg.training import (
    TrainConfig,
    conventional_step,
    draw_augmentation,
    inner_adapt,
    mixed_labels,
    split_episode,
    task_augment,
    train,
)


# -- config validation ------------------------------------------------------

def test_config_rejects_unknown_regime():
    with pytest.raises(ConfigError):
        TrainConfig(regime="maml").validate()


def test_config_rejects_lambda_outside_loss_plus_reg():
    with pytest.raises(ConfigError):
        TrainConfig(regime="plain", lam=0.1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(regime="prometar", lam=0.1).validate()
    TrainConfig(regime="loss-plus-reg", lam=0.0).validate()


def test_config_rejects_nonpositive_beta():
    with pytest.raises(ConfigError):
        TrainConfig(beta=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta=-0.1).validate()
    TrainConfig(alpha=0.0, lr_conv=0.0).validate()  # alpha/lr_conv may be zero


def test_config_rejects_bad_mode_and_misalignment():
    with pytest.raises(ConfigError):
        TrainConfig(meta_gradient_mode="second-order").validate()
    with pytest.raises(ConfigError):
        TrainConfig(encoder_misalignment=-1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta_phi=0.0).validate()


def test_config_effective_defaults():
    cfg = TrainConfig(regime="loss-plus-reg").validate()
    assert cfg.effective_lambda == 0.1
    assert cfg.effective_beta_phi == cfg.beta
    cfg2 = TrainConfig(beta=0.01, beta_phi=0.5).validate()
    assert cfg2.effective_beta_phi == 0.5


# -- episode splitting ------------------------------------------------------

def test_split_episode_is_class_disjoint(small_stack):
    s = small_stack
    episode = split_episode(s["x"], s["y"], np.random.default_rng(1))
    assert not set(episode.classes_tr) & set(episode.classes_val)
    assert set(episode.classes_tr) | set(episode.classes_val) == set(s["y"].tolist())
    assert episode.x_tr.shape[1] + episode.x_val.shape[1] == s["x"].shape[1]
    assert set(episode.y_tr.tolist()) == set(episode.classes_tr)
    assert set(episode.y_val.tolist()) == set(episode.classes_val)


def test_split_episode_deterministic(small_stack):
    s = small_stack
    a = split_episode(s["x"], s["y"], np.random.default_rng(5))
    b = split_episode(s["x"], s["y"], np.random.default_rng(5))
    assert a.classes_tr == b.classes_tr
    assert np.array_equal(a.x_tr, b.x_tr)


def test_split_episode_needs_two_classes(small_stack):
    s = small_stack
    with pytest.raises(DataError):
        split_episode(s["x"][:, :2], np.array([1, 1]), np.random.default_rng(0))


# -- mixup ------------------------------------------------------------------

def test_draw_augmentation_shapes_and_ranges(small_episode):
    episode, draw = small_episode
    n_val = episode.x_val.shape[1]
    assert draw.partner.shape == (n_val,)
    assert draw.rho.shape == (n_val,)
    assert np.all((0.0 <= draw.rho) & (draw.rho <= 1.0))
    assert np.all((0 <= draw.partner) & (draw.partner < episode.x_tr.shape[1]))


def test_beta_1_1_draw_mean_is_half(small_episode):
    episode, _ = small_episode
    rng = np.random.default_rng(77)
    rhos = np.concatenate([draw_augmentation(episode, 1.0, 1.0, rng).rho
                           for _ in range(5000)])
    assert abs(rhos.mean() - 0.5) < 0.005


def test_mixed_labels_are_valid_distributions(small_stack, small_episode):
    episode, draw = small_episode
    labels = mixed_labels(episode, draw, small_stack["candidate_ids"])
    assert labels.shape == (4, episode.x_val.shape[1])
    assert np.all(labels >= 0)
    assert np.allclose(labels.sum(axis=0), 1.0)


def test_mixup_endpoint_identities(small_stack, small_episode):
    s = small_stack
    episode, draw = small_episode
    ids = s["candidate_ids"]
    for rho_val, expect_from in ((1.0, "val"), (0.0, "train")):
        d = dataclasses.replace(draw, rho=np.full_like(draw.rho, rho_val))
        labels = mixed_labels(episode, d, ids)
        if expect_from == "val":
            assert np.array_equal(labels, one_hot(
                [ids.index(c) for c in episode.y_val], 4))
        else:
            assert np.array_equal(labels, one_hot(
                [ids.index(c) for c in episode.y_tr[d.partner]], 4))


def test_task_augment_mixes_embeddings(small_stack):
    s = small_stack
    rng = np.random.default_rng(83)
    episode = split_episode(s["x"], s["y"], rng)
    samples = task_augment(episode, s["prompts"], s["weights"], 1.0, 1.0,
                           np.random.default_rng(85), s["candidate_ids"])
    assert len(samples) == episode.x_val.shape[1]
    h_val = encode_image(episode.x_val, s["prompts"].theta_vis, s["weights"])
    h_tr = encode_image(episode.x_tr, s["prompts"].theta_vis, s["weights"])
    for i, sample in enumerate(samples):
        # the mixed feature must lie on a segment between one val and one
        # train embedding with the recorded rho
        diffs = [np.linalg.norm(sample.features
                                - (sample.rho * h_val[:, i] + (1 - sample.rho) * h_tr[:, j]))
                 for j in range(h_tr.shape[1])]
        assert min(diffs) < 1e-10
        assert sample.soft_label.sum() == pytest.approx(1.0)


def test_draw_augmentation_rejects_empty_train(small_episode):
    episode, _ = small_episode
    empty = dataclasses.replace(episode, x_tr=episode.x_tr[:, :0])
    with pytest.raises(DataError):
        draw_augmentation(empty, 1.0, 1.0, np.random.default_rng(0))


# -- inner adaptation -------------------------------------------------------

def test_alpha_zero_returns_prompt_inputs(small_stack):
    s = small_stack
    cfg = dataclasses.replace(s["config"], alpha=0.0)
    sg = inner_adapt(s["prompts"], s["phi"], s["x"], s["y"], s["weights"],
                     s["classes"], s["candidate_ids"], cfg)
    assert sg.theta_hat_vis is sg.tv
    assert sg.theta_hat_txt is sg.tt


def test_zero_phi_inner_step_is_half_gated(small_stack):
    """With phi = 0 the gate is exactly 0.5: theta_hat = theta - a(g + g_reg/2)."""
    s = small_stack
    cfg = s["config"]
    phi0 = ModulatorParams.zeros(2 * cfg.d_p, cfg.hidden)
    sg = inner_adapt(s["prompts"], phi0, s["x"], s["y"], s["weights"],
                     s["classes"], s["candidate_ids"], cfg)
    hat_vis, hat_txt, g, greg = sg.eval_nodes(
        [sg.theta_hat_vis, sg.theta_hat_txt, sg.g_flat, sg.greg_flat])
    update = (g + 0.5 * greg).ravel()
    expect = s["prompts"].flat() - cfg.alpha * update
    got = np.concatenate([hat_vis.ravel(), hat_txt.ravel()])
    assert np.allclose(got, expect, atol=1e-12)


def test_force_gate_zero_drops_regularizer(small_stack):
    s = small_stack
    cfg = dataclasses.replace(s["config"], force_gate_zero=True)
    sg = inner_adapt(s["prompts"], s["phi"], s["x"], s["y"], s["weights"],
                     s["classes"], s["candidate_ids"], cfg)
    hat_vis, hat_txt, g = sg.eval_nodes([sg.theta_hat_vis, sg.theta_hat_txt, sg.g_flat])
    expect = s["prompts"].flat() - cfg.alpha * g.ravel()
    got = np.concatenate([hat_vis.ravel(), hat_txt.ravel()])
    assert np.allclose(got, expect, atol=1e-12)


def test_conventional_step_descends(small_stack):
    s = small_stack
    for seed in range(20):
        prompts = PromptSet.random(seed, s["config"].d_p, std=0.05)
        stepped, l0 = conventional_step(prompts, s["x"], s["y"], s["weights"],
                                        s["classes"], s["candidate_ids"],
                                        s["config"], lr=1e-3)
        _, l1 = conventional_step(stepped, s["x"], s["y"], s["weights"],
                                  s["classes"], s["candidate_ids"],
                                  s["config"], lr=0.0)
        assert l1 < l0


# -- outer update gradients -------------------------------------------------

def test_outer_gradients_match_finite_differences(small_stack, small_episode):
    s = small_stack
    episode, draw = small_episode
    report = gradcheck_outer(s["prompts"], s["phi"], episode, draw, s["weights"],
                             s["classes"], s["candidate_ids"], s["config"])
    assert report["max_rel_err"] <= 1e-4
    assert report["max_abs_err_small"] <= 1e-8


def test_first_order_mode_differs_from_exact(small_stack, small_episode):
    s = small_stack
    episode, draw = small_episode
    exact = dataclasses.replace(s["config"], meta_gradient_mode="exact")
    fo = dataclasses.replace(s["config"], meta_gradient_mode="first-order")
    g_exact, _ = outer_gradients(s["prompts"], s["phi"], episode, draw,
                                 s["weights"], s["classes"], s["candidate_ids"], exact)
    g_fo, _ = outer_gradients(s["prompts"], s["phi"], episode, draw,
                              s["weights"], s["classes"], s["candidate_ids"], fo)
    assert not np.allclose(g_exact, g_fo)


# -- full training runs -----------------------------------------------------

def _run(dataset, **kw):
    cfg = TrainConfig(**{"epochs": 3, "alpha": 0.01, "beta": 0.01,
                         "lr_conv": 0.01, "seed": 1, **kw}).validate()
    result, weights, classes = pr.run_training(dataset, cfg)
    return result


def test_training_is_deterministic(tiny_dataset):
    a = _run(tiny_dataset, regime="prometar")
    b = _run(tiny_dataset, regime="prometar")
    assert a.prompts.digest() == b.prompts.digest()
    assert a.phi.digest() == b.phi.digest()
    assert a.log == b.log


def test_reduction_prometar_to_plain(tiny_dataset):
    """alpha=0 + gate forced shut reproduces the plain trajectory exactly."""
    plain = _run(tiny_dataset, regime="plain")
    reduced = _run(tiny_dataset, regime="prometar", alpha=0.0, force_gate_zero=True)
    assert reduced.prompts.digest() == plain.prompts.digest()
    for ra, rb in zip(plain.log, reduced.log):
        assert ra["loss"] == rb["loss"]
        assert ra["outer_loss"] == rb["outer_loss"]


def test_reduction_loss_plus_reg_to_plain(tiny_dataset):
    plain = _run(tiny_dataset, regime="plain")
    reduced = _run(tiny_dataset, regime="loss-plus-reg", lam=0.0)
    assert reduced.prompts.digest() == plain.prompts.digest()


def test_loss_plus_reg_with_lambda_differs(tiny_dataset):
    plain = _run(tiny_dataset, regime="plain")
    lpr = _run(tiny_dataset, regime="loss-plus-reg", lam=0.1)
    assert lpr.prompts.digest() != plain.prompts.digest()


def test_epochs_zero_keeps_init(tiny_dataset):
    run = _run(tiny_dataset, regime="plain", epochs=0)
    init = PromptSet.random(
        np.random.default_rng(np.random.SeedSequence(entropy=[1, 0x11])), 4, 0.02)
    assert run.prompts.digest() == init.digest()
    assert run.log == []


def test_regularizer_pull_keeps_prompts_closer_to_reference(tiny_dataset):
    plain = _run(tiny_dataset, regime="plain", epochs=10)
    lpr = _run(tiny_dataset, regime="loss-plus-reg", lam=0.5, epochs=10)
    assert np.linalg.norm(lpr.prompts.flat()) < np.linalg.norm(plain.prompts.flat())


def test_train_log_is_ndjson(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=2, seed=0).validate()
    log_path = tmp_path / "trainlog.ndjson"
    result, *_ = pr.run_training(tiny_dataset, cfg, log_path=log_path)
    lines = log_path.read_text().strip().splitlines()
    assert len(lines) == len(result.log) == 2  # full batch: one step per epoch
    for line, record in zip(lines, result.log):
        doc = json.loads(line)
        assert doc == record
        assert {"step", "regime", "loss", "reg", "outer_loss",
                "gate_mean"} <= set(doc)


def test_gate_stats_are_bounded(tiny_dataset):
    run = _run(tiny_dataset, regime="prometar", epochs=4)
    for record in run.log:
        if record["gate_mean"] is not None:
            assert 0.0 < record["gate_min"] <= record["gate_mean"] \
                <= record["gate_max"] < 1.0


def test_frozen_weights_unchanged_by_training(tiny_dataset):
    cfg = TrainConfig(epochs=2, seed=4).validate()
    weights, classes = pr.build_model(tiny_dataset, cfg)
    before = (weights.digest(), classes.digest())
    result = train(tiny_dataset, cfg, weights, classes)
    assert (weights.digest(), classes.digest()) == before
    assert (result.weights_digest, result.classes_digest) == before
