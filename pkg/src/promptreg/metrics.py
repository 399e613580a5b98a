"""Evaluation metrics and analytical diagnostics.

Accuracy, harmonic mean, and the task-overfitting score summarize a run;
taylor_gap and alignment_terms are runnable versions of the first-order
analysis of the one-step meta objective.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import (
    PromptSet,
    contrastive_loss_node,
    encode_image,
    encode_text,
    one_hot,
    predict_probs,
)
from .errors import DataError
from .training import _label_index, _theta_inputs, inner_adapt


def accuracy(prompts, weights, classes, x, y, candidate_ids, tau=0.07):
    """Top-1 accuracy in percent over the candidate class set."""
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        raise DataError("accuracy: empty evaluation set")
    idx = _label_index(y, candidate_ids)  # raises on unknown classes
    z = encode_image(x, prompts.theta_vis, weights)
    w = encode_text(candidate_ids, prompts.theta_txt, weights, classes)
    probs = predict_probs(z, w, tau)
    probs = probs.reshape(y.size, -1)
    return float((probs.argmax(axis=1) == idx).mean() * 100.0)


def harmonic_mean(base_acc, new_acc):
    """2bn/(b+n), the base/new generalization trade-off summary."""
    if base_acc <= 0 or new_acc <= 0:
        raise DataError("harmonic_mean: inputs must be positive")
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def task_overfitting_score(s_base_pr, s_new_pr, s_base_ref, s_new_ref):
    """delta_base - delta_new against the zero-shot reference.

    The base-side gain is clamped at 0; the new-side difference is not.
    Higher means the method overfits the training task more.
    """
    delta_base = max(0.0, s_base_pr - s_base_ref)
    delta_new = s_new_pr - s_new_ref
    return delta_base - delta_new


def _loss_value_and_grad(prompts, x, y, weights, classes, candidate_ids, tau):
    tv, tt, bindings = _theta_inputs(prompts)
    y_const = ad.const(one_hot(_label_index(y, candidate_ids), len(candidate_ids)))
    loss = contrastive_loss_node(tv, tt, ad.const(x), y_const, weights,
                                 ad.const(classes.columns(candidate_ids)), tau)
    gv, gt = ad.grad(loss, [tv, tt])
    vals = ad.evaluate([loss, gv, gt], bindings)
    flat_grad = np.concatenate([ad.value_of(gv, vals).ravel(),
                                ad.value_of(gt, vals).ravel()])
    return float(ad.value_of(loss, vals)[0, 0]), flat_grad


def loss_at(prompts, x, y, weights, classes, candidate_ids, tau):
    """Contrastive loss at the given prompts (no graph exposed)."""
    loss, _ = _loss_value_and_grad(prompts, x, y, weights, classes, candidate_ids, tau)
    return loss


def taylor_gap(prompts, direction, alpha, x, y, weights, classes, candidate_ids, tau=0.07):
    """|L(theta - alpha d) - [L(theta) - alpha <grad L, d>]|."""
    direction = np.asarray(direction, dtype=np.float64).ravel()
    if alpha == 0.0:
        return 0.0
    l0, g = _loss_value_and_grad(prompts, x, y, weights, classes, candidate_ids, tau)
    stepped = PromptSet.from_flat(prompts.flat() - alpha * direction, prompts.d_p)
    l1 = loss_at(stepped, x, y, weights, classes, candidate_ids, tau)
    return abs(l1 - (l0 - alpha * float(g @ direction)))


@dataclass(frozen=True)
class AlignmentDiagnostics:
    term_val_loss: float    # L(theta; D_val)
    term_g_align: float     # <grad_theta L(theta; D_val), g>
    term_reg_align: float   # <grad_theta L(theta; D_val), gate * g_reg>
    adapted_val_loss: float  # L(theta_hat; D_val)
    first_order_prediction: float
    taylor_residual: float


def alignment_terms(prompts, phi, episode, weights, classes, candidate_ids, config):
    """The three-term decomposition of the one-step outer objective.

    Also evaluates the adapted-prompt validation loss and its first-order
    prediction term_val_loss - alpha * (term2 + term3); their gap shrinks as
    O(alpha^2) for smooth losses.
    """
    sg = inner_adapt(prompts, phi, episode.x_tr, episode.y_tr, weights, classes,
                     candidate_ids, config, include_regularizer=True)
    y_val = ad.const(one_hot(_label_index(episode.y_val, candidate_ids), len(candidate_ids)))
    class_mat = ad.const(classes.columns(candidate_ids))
    loss_val = contrastive_loss_node(sg.tv, sg.tt, ad.const(episode.x_val), y_val,
                                     weights, class_mat, config.tau)
    loss_val_hat = contrastive_loss_node(sg.theta_hat_vis, sg.theta_hat_txt,
                                         ad.const(episode.x_val), y_val, weights,
                                         class_mat, config.tau)
    gv, gt = ad.grad(loss_val, [sg.tv, sg.tt])
    gval_flat = ad.concat_rows([gv, gt])
    gated = (ad.zeros(sg.greg_flat.shape) if config.force_gate_zero
             else ad.hadamard(sg.gate, sg.greg_flat))
    term_g = ad.total(ad.hadamard(gval_flat, sg.g_flat))
    term_reg = ad.total(ad.hadamard(gval_flat, gated))
    out = sg.eval_nodes([loss_val, term_g, term_reg, loss_val_hat])
    val_loss = float(out[0][0, 0])
    t2, t3 = float(out[1][0, 0]), float(out[2][0, 0])
    adapted = float(out[3][0, 0])
    prediction = val_loss - config.alpha * (t2 + t3)
    return AlignmentDiagnostics(
        term_val_loss=val_loss, term_g_align=t2, term_reg_align=t3,
        adapted_val_loss=adapted, first_order_prediction=prediction,
        taylor_residual=abs(adapted - prediction),
    )


# -- run-level reports ------------------------------------------------------

def evaluate_run(prompts, weights, classes, dataset, tau=0.07):
    """Base/new accuracies, zero-shot reference accuracies, H, and tos."""
    ref = PromptSet.reference(weights.d_p)
    xb, yb = dataset.features_and_labels("base-test")
    xn, yn = dataset.features_and_labels("new-test")
    base = accuracy(prompts, weights, classes, xb, yb, dataset.base_classes, tau)
    new = accuracy(prompts, weights, classes, xn, yn, dataset.new_classes, tau)
    base_ref = accuracy(ref, weights, classes, xb, yb, dataset.base_classes, tau)
    new_ref = accuracy(ref, weights, classes, xn, yn, dataset.new_classes, tau)
    row = {
        "base_acc": base,
        "new_acc": new,
        "base_acc_zero_shot": base_ref,
        "new_acc_zero_shot": new_ref,
        "tos": task_overfitting_score(base, new, base_ref, new_ref),
    }
    row["harmonic_mean"] = harmonic_mean(base, new) if base > 0 and new > 0 else None
    return row


REPORT_COLUMNS = ["regime", "seed", "base_acc", "new_acc", "harmonic_mean",
                  "base_acc_zero_shot", "new_acc_zero_shot", "tos"]


def report_to_json(rows, path):
    """Serialize per-run rows plus mean/stddev aggregates, stable key order."""
    doc = {"rows": [dict(sorted(r.items())) for r in rows],
           "aggregates": aggregate_rows(rows)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def aggregate_rows(rows):
    """Mean and stddev of the numeric columns, grouped by regime."""
    groups = {}
    for r in rows:
        groups.setdefault(r.get("regime", ""), []).append(r)
    out = {}
    for regime in sorted(groups):
        agg = {}
        for col in ("base_acc", "new_acc", "harmonic_mean", "tos"):
            vals = [g[col] for g in groups[regime] if g.get(col) is not None]
            if vals:
                agg[f"{col}_mean"] = float(np.mean(vals))
                agg[f"{col}_std"] = float(np.std(vals))
        out[regime] = agg
    return out


def report_to_csv(rows, path, include_aggregates=True):
    rows = sorted(rows, key=lambda r: (r.get("regime", ""), r.get("seed", 0)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([r.get(c, "") for c in REPORT_COLUMNS])
        if include_aggregates:
            for regime, agg in aggregate_rows(rows).items():
                writer.writerow([f"{regime}/mean", "",
                                 agg.get("base_acc_mean", ""), agg.get("new_acc_mean", ""),
                                 agg.get("harmonic_mean_mean", ""), "", "",
                                 agg.get("tos_mean", "")])
                writer.writerow([f"{regime}/std", "",
                                 agg.get("base_acc_std", ""), agg.get("new_acc_std", ""),
                                 agg.get("harmonic_mean_std", ""), "", "",
                                 agg.get("tos_std", "")])
