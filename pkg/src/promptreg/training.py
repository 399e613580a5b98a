"""Episodic training: conventional pre-step, one-step adaptation with gated
regularizer gradients, manifold-mixup task augmentation, and the two outer
meta-updates.

All three regimes share the same per-batch skeleton so that the reduction
identities hold bit-for-bit:

  1. conventional gradient step on the contrastive loss over the full batch;
  2. class-disjoint episode split and one shared mixup draw;
  3. a second update that depends on the regime:
       plain          step on the augmented-validation loss at the current
                      prompts;
       loss-plus-reg  the same step plus a fixed-strength regularizer gradient
                      on the episode-train half;
       prometar       the meta step: one-step inner adaptation with modulated
                      regularizer gradients, then outer updates of prompts and
                      gating parameters through the adapted prompts.

With a zero inner step and the gate forced shut, prometar's second update is
exactly the plain one; with strength zero, loss-plus-reg is exactly plain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encoder import (
    ClassSet,
    EncoderWeights,
    PromptSet,
    contrastive_loss_node,
    image_embedding_node,
    encode_image,
    loss_from_visual_node,
    one_hot,
)
from .errors import ConfigError, DataError, NonFiniteError
from .regularizer import (
    ModulatorParams,
    gate_node,
    modulation_vector_node,
    phi_input_nodes,
    regularizer_node,
)

REGIMES = ("plain", "loss-plus-reg", "prometar")
META_GRADIENT_MODES = ("exact", "first-order")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "prometar"
    alpha: float = 0.0025       # inner step size
    beta: float = 0.0025        # outer step size
    beta_phi: float | None = None  # modulator rate; None: same as beta
    lr_conv: float = 0.0025    # conventional pre-step rate
    epochs: int = 15
    batch_size: int = 0         # 0: full batch
    mu: float = 1.0             # mixup Beta parameters
    nu: float = 1.0
    lam: float | None = None    # fixed regularization strength (loss-plus-reg)
    d_p: int = 4
    d_e: int = 8
    hidden: int = 32
    tau: float = 0.07
    prompt_init_std: float = 0.02
    encoder_misalignment: float = 0.0
    meta_gradient_mode: str = "exact"
    detach_modulator_inputs: bool = True
    force_gate_zero: bool = False
    align_every: int = 10
    seed: int = 0

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.meta_gradient_mode not in META_GRADIENT_MODES:
            raise ConfigError(f"unknown meta_gradient_mode {self.meta_gradient_mode!r}")
        if self.alpha < 0 or self.beta <= 0 or self.lr_conv < 0:
            raise ConfigError("step sizes must be positive (alpha/lr_conv may be 0)")
        if self.mu <= 0 or self.nu <= 0:
            raise ConfigError("mixup Beta parameters must be positive")
        if self.lam is not None and self.regime != "loss-plus-reg":
            raise ConfigError("lambda is only meaningful under the loss-plus-reg regime")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.epochs < 0 or self.batch_size < 0:
            raise ConfigError("epochs and batch_size must be nonnegative")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.encoder_misalignment < 0:
            raise ConfigError("encoder_misalignment must be nonnegative")
        if self.beta_phi is not None and self.beta_phi <= 0:
            raise ConfigError("beta_phi must be positive when set")
        return self

    @property
    def effective_lambda(self):
        return 0.1 if self.lam is None else self.lam

    @property
    def effective_beta_phi(self):
        return self.beta if self.beta_phi is None else self.beta_phi


@dataclass
class Episode:
    """Class-disjoint split of one batch into train and validation halves."""

    x_tr: np.ndarray   # (d_x, B_tr)
    y_tr: np.ndarray   # int labels
    x_val: np.ndarray
    y_val: np.ndarray
    classes_tr: list
    classes_val: list


def split_episode(x, y, rng):
    """Randomly partition the batch's classes into two nonempty halves."""
    y = np.asarray(y, dtype=int)
    present = sorted(set(int(c) for c in y))
    if len(present) < 2:
        raise DataError("split_episode: batch must contain at least 2 distinct classes")
    perm = rng.permutation(len(present))
    n_tr = (len(present) + 1) // 2
    cls_tr = sorted(present[i] for i in perm[:n_tr])
    cls_val = sorted(present[i] for i in perm[n_tr:])
    in_tr = np.isin(y, cls_tr)
    return Episode(x_tr=x[:, in_tr], y_tr=y[in_tr],
                   x_val=x[:, ~in_tr], y_val=y[~in_tr],
                   classes_tr=cls_tr, classes_val=cls_val)


@dataclass(frozen=True)
class AugmentationDraw:
    """One shared mixup draw: a train partner and ratio per validation sample."""

    partner: np.ndarray  # index into episode train columns, one per val sample
    rho: np.ndarray      # mixture ratios in [0, 1]


def draw_augmentation(episode, mu, nu, rng):
    if episode.x_tr.shape[1] == 0:
        raise DataError("task_augment: empty episode-train subset")
    n_val = episode.x_val.shape[1]
    partner = rng.integers(0, episode.x_tr.shape[1], size=n_val)
    rho = rng.beta(mu, nu, size=n_val)
    return AugmentationDraw(partner=partner, rho=rho)


@dataclass(frozen=True)
class AugmentedSample:
    features: np.ndarray    # mixed final visual embedding, (d_e,)
    soft_label: np.ndarray  # distribution over the candidate classes
    rho: float


def _label_index(labels, candidate_ids):
    lookup = {c: i for i, c in enumerate(candidate_ids)}
    try:
        return np.array([lookup[int(c)] for c in labels], dtype=int)
    except KeyError as e:
        raise DataError(f"label {e.args[0]} not among candidate classes") from e


def mixed_labels(episode, draw, candidate_ids):
    """(K, B_val) soft labels: rho-weighted one-hot mixtures."""
    k = len(candidate_ids)
    y_val = one_hot(_label_index(episode.y_val, candidate_ids), k)
    y_tr = one_hot(_label_index(episode.y_tr, candidate_ids), k)[:, draw.partner]
    return y_val * draw.rho + y_tr * (1.0 - draw.rho)


def task_augment(episode, prompts, weights, mu, nu, rng, candidate_ids):
    """Emit one mixed sample per validation sample, at the given prompts."""
    draw = draw_augmentation(episode, mu, nu, rng)
    h_val = encode_image(episode.x_val, prompts.theta_vis, weights)
    h_tr = encode_image(episode.x_tr, prompts.theta_vis, weights)[:, draw.partner]
    mixed = h_val * draw.rho + h_tr * (1.0 - draw.rho)
    labels = mixed_labels(episode, draw, candidate_ids)
    return [AugmentedSample(features=mixed[:, i].copy(), soft_label=labels[:, i].copy(),
                            rho=float(draw.rho[i]))
            for i in range(episode.x_val.shape[1])]


# -- graph assembly ---------------------------------------------------------

@dataclass
class StepGraph:
    """All named nodes of one meta/baseline step, plus their bindings."""

    tv: ad.Node
    tt: ad.Node
    phi_nodes: dict | None
    bindings: dict
    loss_tr: ad.Node | None = None
    reg: ad.Node | None = None
    g_flat: ad.Node | None = None
    greg_flat: ad.Node | None = None
    gate: ad.Node | None = None
    theta_hat_vis: ad.Node | None = None
    theta_hat_txt: ad.Node | None = None
    outer_loss: ad.Node | None = None

    def eval_nodes(self, nodes):
        vals = ad.evaluate([n for n in nodes if n is not None], self.bindings)
        return [None if n is None else ad.value_of(n, vals) for n in nodes]


def _theta_inputs(prompts):
    tv = ad.inp("theta_vis", prompts.theta_vis.shape)
    tt = ad.inp("theta_txt", prompts.theta_txt.shape)
    return tv, tt, {tv: prompts.theta_vis, tt: prompts.theta_txt}


def _block_selectors(d_p):
    p = 2 * d_p
    s_vis = np.zeros((d_p, p))
    s_vis[:, :d_p] = np.eye(d_p)
    s_txt = np.zeros((d_p, p))
    s_txt[:, d_p:] = np.eye(d_p)
    return ad.const(s_vis), ad.const(s_txt)


def inner_adapt(prompts, phi, x_tr, y_tr, weights, classes, candidate_ids, config,
                include_regularizer=True):
    """Build the one-step adapted prompts as differentiable expressions.

    Returns a StepGraph whose theta_hat_* nodes depend on both the prompt
    inputs and (through the gate) the modulator inputs.  `alpha == 0` returns
    the prompt inputs themselves, the documented degenerate case.
    """
    tv, tt, bindings = _theta_inputs(prompts)
    phi_nodes, phi_bind = phi_input_nodes(phi)
    bindings.update(phi_bind)
    x_node = ad.const(x_tr)
    y_const = ad.const(one_hot(_label_index(y_tr, candidate_ids), len(candidate_ids)))
    class_mat = ad.const(classes.columns(candidate_ids))
    loss_tr = contrastive_loss_node(tv, tt, x_node, y_const, weights, class_mat, config.tau)
    g_vis, g_txt = ad.grad(loss_tr, [tv, tt])
    g_flat = ad.concat_rows([g_vis, g_txt])
    sg = StepGraph(tv=tv, tt=tt, phi_nodes=phi_nodes, bindings=bindings,
                   loss_tr=loss_tr, g_flat=g_flat)

    if include_regularizer:
        present = sorted(set(int(c) for c in y_tr))
        sg.reg = regularizer_node(tv, tt, x_node, x_tr, weights, classes, present)
        greg_vis, greg_txt = ad.grad(sg.reg, [tv, tt])
        sg.greg_flat = ad.concat_rows([greg_vis, greg_txt])
        m = modulation_vector_node(g_flat, sg.greg_flat, phi_nodes,
                                   detach_inputs=config.detach_modulator_inputs)
        sg.gate = gate_node(m)
        if config.force_gate_zero:
            gated = ad.zeros(sg.greg_flat.shape)
        elif config.meta_gradient_mode == "first-order":
            gated = ad.hadamard(sg.gate, ad.detach(sg.greg_flat))
        else:
            gated = ad.hadamard(sg.gate, sg.greg_flat)
        update = ad.add(ad.detach(g_flat) if config.meta_gradient_mode == "first-order"
                        else g_flat, gated)
    else:
        update = ad.detach(g_flat) if config.meta_gradient_mode == "first-order" else g_flat

    if config.alpha == 0.0:
        sg.theta_hat_vis, sg.theta_hat_txt = tv, tt
    else:
        s_vis, s_txt = _block_selectors(config.d_p)
        sg.theta_hat_vis = ad.sub(tv, ad.scale(ad.matmul(s_vis, update), config.alpha))
        sg.theta_hat_txt = ad.sub(tt, ad.scale(ad.matmul(s_txt, update), config.alpha))
    return sg


def augmented_val_loss_node(th_vis, th_txt, episode, draw, weights, classes,
                            candidate_ids, tau):
    """Soft-label loss on the mixup-augmented validation set.

    Visual embeddings of both mix partners are computed with the supplied
    prompt expressions, mixed with the (constant) draw ratios, and scored
    against the text embeddings from the same prompts.
    """
    z_val = image_embedding_node(th_vis, ad.const(episode.x_val), weights)
    z_tr = image_embedding_node(th_vis, ad.const(episode.x_tr[:, draw.partner]), weights)
    d_e = z_val.shape[0]
    rho_row = ad.const(draw.rho.reshape(1, -1))
    mixed = ad.add(ad.hadamard(z_val, ad.broadcast_rows(rho_row, d_e)),
                   ad.hadamard(z_tr, ad.broadcast_rows(ad.const(1.0 - draw.rho.reshape(1, -1)),
                                                       d_e)))
    y_hat = ad.const(mixed_labels(episode, draw, candidate_ids))
    class_mat = ad.const(classes.columns(candidate_ids))
    return loss_from_visual_node(mixed, th_txt, y_hat, weights, class_mat, tau)


def conventional_step(prompts, x, y, weights, classes, candidate_ids, config,
                      lr=None):
    """One SGD step on the contrastive loss over the full batch."""
    if x.shape[1] == 0:
        raise DataError("conventional_step: empty batch")
    lr = config.lr_conv if lr is None else lr
    tv, tt, bindings = _theta_inputs(prompts)
    y_const = ad.const(one_hot(_label_index(y, candidate_ids), len(candidate_ids)))
    loss = contrastive_loss_node(tv, tt, ad.const(x), y_const, weights,
                                 ad.const(classes.columns(candidate_ids)), config.tau)
    g_vis, g_txt = ad.grad(loss, [tv, tt])
    vals = ad.evaluate([loss, g_vis, g_txt], bindings)
    new = PromptSet(prompts.theta_vis - lr * ad.value_of(g_vis, vals),
                    prompts.theta_txt - lr * ad.value_of(g_txt, vals))
    return new, float(ad.value_of(loss, vals)[0, 0])


def outer_update(prompts, phi, episode, draw, weights, classes, candidate_ids, config):
    """The prometar meta step: adapt, then update prompts and gate through it.

    The adaptation is committed — the new prompts start from the adapted
    Θ̂ rather than Θ — so the gated regularizer pull acts on the prompts
    directly, and the meta term β·∇_Θ L(Θ̂; Aug(D_val)) (taken through Θ̂)
    steers both the prompts and the gates toward updates that generalize to
    the held-out episode classes.

    Returns (new prompts, new phi, stats dict).
    """
    sg = inner_adapt(prompts, phi, episode.x_tr, episode.y_tr, weights, classes,
                     candidate_ids, config, include_regularizer=True)
    sg.outer_loss = augmented_val_loss_node(sg.theta_hat_vis, sg.theta_hat_txt, episode,
                                            draw, weights, classes, candidate_ids, config.tau)
    wrt = [sg.tv, sg.tt] + [sg.phi_nodes[k] for k in ("w1", "b1", "w2", "b2")]
    grads = ad.grad(sg.outer_loss, wrt)
    evaled = sg.eval_nodes([sg.outer_loss, sg.loss_tr, sg.reg, sg.gate,
                            sg.theta_hat_vis, sg.theta_hat_txt] + grads)
    outer_val = float(evaled[0][0, 0])
    if not np.isfinite(outer_val):
        raise NonFiniteError(
            f"outer loss is non-finite (loss={evaled[1]}, reg={evaled[2]})")
    hat_vis, hat_txt = evaled[4], evaled[5]
    d_tv, d_tt, d_w1, d_b1, d_w2, d_b2 = evaled[6:]
    for name, g in (("theta", d_tv), ("theta", d_tt), ("phi", d_w1), ("phi", d_b1),
                    ("phi", d_w2), ("phi", d_b2)):
        ad.check_finite(g, f"outer gradient w.r.t. {name}")
    new_prompts = PromptSet(hat_vis - config.beta * d_tv,
                            hat_txt - config.beta * d_tt)
    bp = config.effective_beta_phi
    new_phi = ModulatorParams(phi.w1 - bp * d_w1, phi.b1 - bp * d_b1,
                              phi.w2 - bp * d_w2, phi.b2 - bp * d_b2)
    gate_vals = evaled[3].ravel()
    stats = {
        "outer_loss": outer_val,
        "inner_loss": float(evaled[1][0, 0]),
        "reg": float(evaled[2][0, 0]),
        "gate_mean": float(gate_vals.mean()),
        "gate_min": float(gate_vals.min()),
        "gate_max": float(gate_vals.max()),
    }
    return new_prompts, new_phi, stats


def _baseline_second_step(prompts, episode, draw, weights, classes, candidate_ids,
                          config, with_reg):
    """Shared second update of the plain and loss-plus-reg regimes."""
    tv, tt, bindings = _theta_inputs(prompts)
    loss = augmented_val_loss_node(tv, tt, episode, draw, weights, classes,
                                   candidate_ids, config.tau)
    nodes = [loss] + ad.grad(loss, [tv, tt])
    reg_val = None
    if with_reg and config.effective_lambda != 0.0:
        present = sorted(set(int(c) for c in episode.y_tr))
        reg = regularizer_node(tv, tt, ad.const(episode.x_tr), episode.x_tr, weights,
                               classes, present)
        nodes += [reg] + ad.grad(reg, [tv, tt])
    vals = ad.evaluate(nodes, bindings)
    arrs = [ad.value_of(n, vals) for n in nodes]
    d_tv, d_tt = arrs[1], arrs[2]
    if len(arrs) > 3:
        reg_val = float(arrs[3][0, 0])
        lam = config.effective_lambda
        d_tv = d_tv + lam * arrs[4]
        d_tt = d_tt + lam * arrs[5]
    new = PromptSet(prompts.theta_vis - config.beta * d_tv,
                    prompts.theta_txt - config.beta * d_tt)
    return new, {"outer_loss": float(arrs[0][0, 0]), "reg": reg_val}


@dataclass
class TrainResult:
    prompts: PromptSet
    phi: ModulatorParams
    log: list
    weights_digest: str
    classes_digest: str


def _stream(seed, tag):
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), tag]))

STREAM_INIT, STREAM_BATCH, STREAM_SPLIT, STREAM_MIXUP = 0x11, 0xBA, 0x59, 0x31


def train(dataset, config, weights, classes, log_path=None):
    """Run the configured regime over the dataset's base-train split."""
    candidate_ids = list(dataset.base_classes)
    x_all, y_all = dataset.features_and_labels("base-train")
    return train_arrays(x_all, y_all, candidate_ids, config, weights, classes,
                        log_path=log_path)


def train_arrays(x_all, y_all, candidate_ids, config, weights, classes, log_path=None):
    """Core training loop over raw arrays.

    Randomness flows through named streams derived from config.seed (init,
    batching, episode split, mixup), so one consumer's draw count never
    perturbs another's.
    """
    config.validate()
    candidate_ids = list(candidate_ids)
    if len(candidate_ids) < 2:
        raise ConfigError("train: need at least 2 base classes")
    if x_all.shape[1] == 0:
        raise ConfigError("train: empty training split")

    prompts = PromptSet.random(_stream(config.seed, STREAM_INIT), config.d_p,
                               config.prompt_init_std)
    phi = ModulatorParams.zeros(2 * config.d_p, config.hidden)
    rng_batch = _stream(config.seed, STREAM_BATCH)
    rng_split = _stream(config.seed, STREAM_SPLIT)
    rng_mixup = _stream(config.seed, STREAM_MIXUP)

    w_digest, c_digest = weights.digest(), classes.digest()
    log = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for _epoch in range(config.epochs):
            order = rng_batch.permutation(x_all.shape[1])
            bsz = config.batch_size or x_all.shape[1]
            for start in range(0, x_all.shape[1], bsz):
                idx = order[start:start + bsz]
                x, y = x_all[:, idx], y_all[idx]
                prompts, conv_loss = conventional_step(prompts, x, y, weights, classes,
                                                       candidate_ids, config)
                record = {"step": step, "regime": config.regime, "loss": conv_loss,
                          "inner_loss": None,
                          "reg": None, "outer_loss": None, "gate_mean": None,
                          "gate_min": None, "gate_max": None,
                          "align_g": None, "align_greg": None}
                if len(set(int(c) for c in y)) >= 2:
                    episode = split_episode(x, y, rng_split)
                    draw = draw_augmentation(episode, config.mu, config.nu, rng_mixup)
                    if config.regime == "prometar":
                        prompts, phi, stats = outer_update(prompts, phi, episode, draw,
                                                           weights, classes, candidate_ids,
                                                           config)
                        record.update(stats)
                        if config.align_every and step % config.align_every == 0:
                            terms = _alignment_terms(prompts, phi, episode, weights,
                                                     classes, candidate_ids, config)
                            record["align_g"] = terms[0]
                            record["align_greg"] = terms[1]
                    else:
                        prompts, stats = _baseline_second_step(
                            prompts, episode, draw, weights, classes, candidate_ids,
                            config, with_reg=(config.regime == "loss-plus-reg"))
                        record.update(stats)
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if log_fh:
            log_fh.close()

    if weights.digest() != w_digest or classes.digest() != c_digest:
        raise NonFiniteError("frozen encoder state changed during training")
    return TrainResult(prompts=prompts, phi=phi, log=log,
                       weights_digest=w_digest, classes_digest=c_digest)


def _alignment_terms(prompts, phi, episode, weights, classes, candidate_ids, config):
    """<grad val loss, g> and <grad val loss, gate * g_reg> at the current prompts."""
    sg = inner_adapt(prompts, phi, episode.x_tr, episode.y_tr, weights, classes,
                     candidate_ids, config, include_regularizer=True)
    y_val = ad.const(one_hot(_label_index(episode.y_val, candidate_ids), len(candidate_ids)))
    loss_val = contrastive_loss_node(sg.tv, sg.tt, ad.const(episode.x_val), y_val, weights,
                                     ad.const(classes.columns(candidate_ids)), config.tau)
    gv, gt = ad.grad(loss_val, [sg.tv, sg.tt])
    gval_flat = ad.concat_rows([gv, gt])
    term_g = ad.total(ad.hadamard(gval_flat, sg.g_flat))
    term_reg = ad.total(ad.hadamard(gval_flat, ad.hadamard(sg.gate, sg.greg_flat)))
    vals = ad.evaluate([term_g, term_reg], sg.bindings)
    return (float(ad.value_of(term_g, vals)[0, 0]), float(ad.value_of(term_reg, vals)[0, 0]))
