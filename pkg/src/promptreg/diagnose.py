"""Runnable diagnostics: gradient checks against finite differences, and the
second-order scaling behavior of first-order predictions."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import compare_gradients, fd_gradient
from .encoder import PromptSet
from .metrics import alignment_terms, taylor_gap
from .regularizer import ModulatorParams
from .training import augmented_val_loss_node, inner_adapt


def outer_loss_value(prompts, phi, episode, draw, weights, classes, candidate_ids, config):
    """Evaluate the one-step outer objective at the given parameters."""
    sg = inner_adapt(prompts, phi, episode.x_tr, episode.y_tr, weights, classes,
                     candidate_ids, config, include_regularizer=True)
    loss = augmented_val_loss_node(sg.theta_hat_vis, sg.theta_hat_txt, episode, draw,
                                   weights, classes, candidate_ids, config.tau)
    return float(sg.eval_nodes([loss])[0][0, 0])


def outer_gradients(prompts, phi, episode, draw, weights, classes, candidate_ids, config):
    """Autodiff meta-gradients of the outer objective, flat over theta and phi."""
    sg = inner_adapt(prompts, phi, episode.x_tr, episode.y_tr, weights, classes,
                     candidate_ids, config, include_regularizer=True)
    loss = augmented_val_loss_node(sg.theta_hat_vis, sg.theta_hat_txt, episode, draw,
                                   weights, classes, candidate_ids, config.tau)
    wrt = [sg.tv, sg.tt] + [sg.phi_nodes[k] for k in ("w1", "b1", "w2", "b2")]
    grads = sg.eval_nodes(ad.grad(loss, wrt))
    g_theta = np.concatenate([grads[0].ravel(), grads[1].ravel()])
    g_phi = np.concatenate([g.ravel() for g in grads[2:]])
    return g_theta, g_phi


def gradcheck_outer(prompts, phi, episode, draw, weights, classes, candidate_ids, config,
                    h=1e-5):
    """Compare autodiff meta-gradients against central finite differences.

    Runs in exact mode with the modulator-input detachment disabled: finite
    differences always see the dependence of the outer loss on the gradients
    fed to the gating network, so the analytic graph must keep that path too
    for the comparison to be well-posed.  Returns per-parameter-group maxima
    of the relative error (and of the absolute error on near-zero
    coordinates).
    """
    config = dataclasses.replace(config, meta_gradient_mode="exact",
                                 detach_modulator_inputs=False)
    g_theta, g_phi = outer_gradients(prompts, phi, episode, draw, weights, classes,
                                     candidate_ids, config)

    def f_theta(flat):
        return outer_loss_value(PromptSet.from_flat(flat, prompts.d_p), phi, episode,
                                draw, weights, classes, candidate_ids, config)

    def f_phi(flat):
        phi2 = ModulatorParams.from_flat(flat, phi.n_prompt_params, phi.hidden)
        return outer_loss_value(prompts, phi2, episode, draw, weights, classes,
                                candidate_ids, config)

    fd_theta = fd_gradient(f_theta, prompts.flat(), h)
    fd_phi = fd_gradient(f_phi, phi.flat(), h)
    rel_t, abs_t, worst_t = compare_gradients(g_theta, fd_theta)
    rel_p, abs_p, worst_p = compare_gradients(g_phi, fd_phi)
    return {
        "theta": {"max_rel_err": rel_t, "max_abs_err_small": abs_t, "worst_coord": worst_t},
        "phi": {"max_rel_err": rel_p, "max_abs_err_small": abs_p, "worst_coord": worst_p},
        "max_rel_err": max(rel_t, rel_p),
        "max_abs_err_small": max(abs_t, abs_p),
    }


def taylor_halving_ratios(prompts, x, y, weights, classes, candidate_ids, tau,
                          alphas=(1e-2, 5e-3), n_directions=20, seed=0):
    """Mean gap(alpha)/gap(alpha/2) per alpha; ~4 for smooth losses."""
    rng = np.random.default_rng(seed)
    ratios = []
    for alpha in alphas:
        rs = []
        for _ in range(n_directions):
            d = rng.normal(size=prompts.n_params)
            d /= np.linalg.norm(d)
            big = taylor_gap(prompts, d, alpha, x, y, weights, classes, candidate_ids, tau)
            small = taylor_gap(prompts, d, alpha / 2.0, x, y, weights, classes,
                               candidate_ids, tau)
            if small > 0:
                rs.append(big / small)
        ratios.append(float(np.mean(rs)))
    return {f"alpha={a:g}": r for a, r in zip(alphas, ratios)}


def alignment_halving_ratios(prompts, phi, episode, weights, classes, candidate_ids,
                             config, alphas=(1e-2, 5e-3)):
    """Residual(alpha)/residual(alpha/2) of the first-order outer prediction."""
    out = {}
    for alpha in alphas:
        big = alignment_terms(prompts, phi, episode, weights, classes, candidate_ids,
                              dataclasses.replace(config, alpha=alpha)).taylor_residual
        small = alignment_terms(prompts, phi, episode, weights, classes, candidate_ids,
                                dataclasses.replace(config, alpha=alpha / 2.0)).taylor_residual
        out[f"alpha={alpha:g}"] = big / small if small > 0 else float("nan")
    return out
