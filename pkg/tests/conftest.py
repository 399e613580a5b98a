"""Shared fixtures: small model stacks and episodes used across test modules."""

import numpy as np
import pytest

import promptreg as pr
from promptreg.encoder import ClassSet, EncoderWeights, PromptSet
from promptreg.regularizer import ModulatorParams
from promptreg.training import TrainConfig, draw_augmentation, split_episode


@pytest.fixture
def small_stack():
    """Tiny instance: d_p=2, hidden=4, 4 classes, 8 samples (<= 64 params)."""
    rng = np.random.default_rng(7)
    d_x, d_p, d_e, n_classes = 5, 2, 3, 4
    weights = EncoderWeights.aligned(11, d_x=d_x, d_p=d_p, d_e=d_e)
    classes = ClassSet.random(13, d_c=d_x, n_classes=n_classes)
    x = rng.normal(size=(d_x, 8))
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    config = TrainConfig(regime="prometar", alpha=0.05, beta=0.01, lr_conv=0.01,
                         d_p=d_p, d_e=d_e, hidden=4, seed=3).validate()
    prompts = PromptSet.random(17, d_p, std=0.1)
    phi = ModulatorParams(rng.normal(0.0, 0.3, (4, 2 * 2 * d_p)),
                          rng.normal(0.0, 0.3, (4, 1)),
                          rng.normal(0.0, 0.3, (2 * d_p, 4)),
                          rng.normal(0.0, 0.3, (2 * d_p, 1)))
    return {
        "weights": weights, "classes": classes, "x": x, "y": y,
        "config": config, "prompts": prompts, "phi": phi,
        "candidate_ids": [0, 1, 2, 3],
    }


@pytest.fixture
def small_episode(small_stack):
    s = small_stack
    rng = np.random.default_rng(23)
    episode = split_episode(s["x"], s["y"], rng)
    draw = draw_augmentation(episode, s["config"].mu, s["config"].nu, rng)
    return episode, draw


@pytest.fixture
def tiny_dataset():
    return pr.generate(pr.TaskSpec(n_classes=6, d_x=8, shots=6, test_shots=8,
                                   noise=0.8, seed=5))
