"""Embedding-anchoring regularizer and the learnable gradient-gating network.

The regularizer penalizes drift of prompted embeddings away from the frozen
zero-prompt (reference) embeddings with a smooth |.| surrogate.  The gating
network maps the concatenated loss/regularizer gradients to per-coordinate
logits; its sigmoid output multiplies the regularizer gradient elementwise,
so every coordinate is shrunk but never sign-flipped.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import (
    encode_image,
    encode_text,
    image_embedding_node,
    reference_image_embedding,
    reference_text_embedding,
    text_embedding_node,
)
from .errors import ShapeError
from .serialize import load_arrays, save_arrays

DEFAULT_HIDDEN = 32


def regularizer_value(prompts, x_batch, weights, classes, class_ids):
    """R = R_vis + R_txt with smooth-abs entries (plain numpy path)."""
    z = encode_image(x_batch, prompts.theta_vis, weights)
    z_ref = reference_image_embedding(x_batch, weights)
    w = encode_text(class_ids, prompts.theta_txt, weights, classes)
    w_ref = reference_text_embedding(class_ids, weights, classes)
    eps = ad.SMOOTH_ABS_EPS
    r_vis = np.sqrt((z - z_ref) ** 2 + eps).sum()
    r_txt = np.sqrt((w - w_ref) ** 2 + eps).sum()
    return float(r_vis + r_txt)


def regularizer_node(theta_vis, theta_txt, x_node, x_values, weights, classes, class_ids):
    """Differentiable regularizer; reference embeddings enter as constants.

    `x_values` is the numeric (d_x, B) batch backing `x_node`, needed to
    precompute the detached reference embeddings.
    """
    z = image_embedding_node(theta_vis, x_node, weights)
    z_ref = ad.const(reference_image_embedding(x_values, weights))
    w = text_embedding_node(theta_txt, ad.const(classes.columns(class_ids)), weights)
    w_ref = ad.const(reference_text_embedding(class_ids, weights, classes))
    return ad.add(ad.total(ad.smooth_abs(ad.sub(z, z_ref))),
                  ad.total(ad.smooth_abs(ad.sub(w, w_ref))))


@dataclass
class ModulatorParams:
    """Two-layer tanh network: R^{2P} -> R^{H} -> R^{P}."""

    w1: np.ndarray  # (H, 2P)
    b1: np.ndarray  # (H, 1)
    w2: np.ndarray  # (P, H)
    b2: np.ndarray  # (P, 1)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1, 1)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1, 1)
        h, two_p = self.w1.shape
        p = two_p // 2
        if two_p != 2 * p or self.w2.shape != (p, h) or self.b1.shape != (h, 1) \
                or self.b2.shape != (p, 1):
            raise ShapeError("ModulatorParams: inconsistent layer shapes")

    @property
    def n_prompt_params(self):
        return self.w2.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @staticmethod
    def zeros(n_prompt_params, hidden=DEFAULT_HIDDEN):
        """All-zero init: gate is exactly 0.5 everywhere (warm start)."""
        p = n_prompt_params
        return ModulatorParams(np.zeros((hidden, 2 * p)), np.zeros((hidden, 1)),
                               np.zeros((p, hidden)), np.zeros((p, 1)))

    def copy(self):
        return ModulatorParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def arrays(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def flat(self):
        return np.concatenate([a.ravel() for a in (self.w1, self.b1, self.w2, self.b2)])

    @staticmethod
    def from_flat(vec, n_prompt_params, hidden=DEFAULT_HIDDEN):
        p, h = n_prompt_params, hidden
        sizes = [h * 2 * p, h, p * h, p]
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != sum(sizes):
            raise ShapeError(f"ModulatorParams.from_flat: expected {sum(sizes)} values")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return ModulatorParams(parts[0].reshape(h, 2 * p), parts[1].reshape(h, 1),
                               parts[2].reshape(p, h), parts[3].reshape(p, 1))

    def save(self, path):
        save_arrays(path, "modulator-params", self.arrays())

    @staticmethod
    def load(path):
        arrs = load_arrays(path, kind="modulator-params")
        return ModulatorParams(arrs["w1"], arrs["b1"], arrs["w2"], arrs["b2"])

    def digest(self):
        h = hashlib.sha256()
        for a in (self.w1, self.b1, self.w2, self.b2):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def modulation_vector(g, g_reg, phi):
    """Numeric forward of the gating network on a flat gradient pair."""
    g = np.asarray(g, dtype=np.float64).reshape(-1, 1)
    g_reg = np.asarray(g_reg, dtype=np.float64).reshape(-1, 1)
    p = phi.n_prompt_params
    if g.shape[0] != p or g_reg.shape[0] != p:
        raise ShapeError(f"modulation_vector: expected length-{p} gradients")
    x = np.concatenate([g, g_reg], axis=0)
    return phi.w2 @ np.tanh(phi.w1 @ x + phi.b1) + phi.b2


def modulate(g_reg, m):
    """Elementwise sigmoid gate applied to the regularizer gradient."""
    g_reg = np.asarray(g_reg, dtype=np.float64).reshape(-1, 1)
    m = np.asarray(m, dtype=np.float64).reshape(-1, 1)
    if g_reg.shape != m.shape:
        raise ShapeError("modulate: length mismatch")
    return 1.0 / (1.0 + np.exp(-m)) * g_reg


def phi_input_nodes(phi):
    """Graph inputs mirroring the modulator layout, with their bindings."""
    nodes = {
        "w1": ad.inp("phi_w1", phi.w1.shape),
        "b1": ad.inp("phi_b1", phi.b1.shape),
        "w2": ad.inp("phi_w2", phi.w2.shape),
        "b2": ad.inp("phi_b2", phi.b2.shape),
    }
    bindings = {nodes[k]: phi.arrays()[k] for k in nodes}
    return nodes, bindings


def modulation_vector_node(g_flat, greg_flat, phi_nodes, detach_inputs=True):
    """Graph forward of the gating network.

    By default the gradient inputs are detached: the gate still shapes the
    update and stays exactly differentiable w.r.t. the gating parameters, but
    no third-order terms flow back through the gradients themselves.
    """
    if detach_inputs:
        g_flat, greg_flat = ad.detach(g_flat), ad.detach(greg_flat)
    x = ad.concat_rows([g_flat, greg_flat])
    h = ad.tanh(ad.add(ad.matmul(phi_nodes["w1"], x), phi_nodes["b1"]))
    return ad.add(ad.matmul(phi_nodes["w2"], h), phi_nodes["b2"])


def gate_node(m_node):
    return ad.sigmoid(m_node)
