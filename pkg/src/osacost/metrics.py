"""Training losses for the cost model and evaluation metrics.

The regression loss compares each patient's expected annual cost (sum over
target visits of sum_c p_c * e_c) with the true annual cost; the
classification loss is cross entropy averaged per patient, then over
patients. They are combined as ``log10(L1) + L2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, ops

LOG_EPS = 1e-12
TOP_K = (3, 5, 10)


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    combined: float

    def to_dict(self):
        return asdict(self)


def expected_costs(probs, cost_vector):
    """Per-position expected cost sum_c p_c e_c; ``probs`` is [B, T, C]."""
    e = Tensor(np.asarray(cost_vector).reshape(-1, 1), dtype=probs.dtype)
    B, T, _ = probs.shape
    return ops.reshape(ops.matmul(probs, e), (B, T))


def regression_loss_l1(probs, cost_vector, true_costs, mask):
    """Mean over patients of (annual expected cost - annual true cost)^2.

    Args:
        probs: [B, T, C] predicted class probabilities (Tensor).
        cost_vector: [C] euro cost per class id.
        true_costs: [B, T] actual cost per target visit (0 on padding).
        mask: [B, T], 1 on real target visits.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    B, T, C = probs.shape
    cost_vector = np.asarray(cost_vector, dtype=np.float64)
    if cost_vector.shape != (C,):
        raise ValueError(f"cost vector length {cost_vector.shape} != classes {C}")
    true_costs = np.asarray(true_costs, dtype=probs.dtype)
    mask = np.asarray(mask, dtype=probs.dtype)
    if true_costs.shape != (B, T) or mask.shape != (B, T):
        raise ValueError(f"true_costs/mask must be {(B, T)}")
    pred = ops.mul(expected_costs(probs, cost_vector), Tensor(mask, dtype=probs.dtype))
    annual_pred = ops.sum(pred, axis=1)
    diff = ops.sub(annual_pred, Tensor((true_costs * mask).sum(axis=1), dtype=probs.dtype))
    return ops.mean(ops.square(diff))


def multilabel_loss_l2(logits, targets, mask):
    """Cross entropy, mean over each patient's visits then over patients.

    ``logits`` is [B, C, T] (class axis second) as for
    :func:`osacost.autodiff.ops.cross_entropy_logits`.
    """
    return ops.cross_entropy_logits(logits, targets, mask)


def combined_loss(l1, l2):
    """log10(max(l1, eps)) + l2."""
    if isinstance(l1, Tensor):
        return ops.add(ops.log10(ops.clamp_min(l1, LOG_EPS)), l2)
    return math.log10(max(float(l1), LOG_EPS)) + float(l2)


def m2_losses(logits, batch, cost_vector):
    """All three losses for a teacher-forced cost-model pass.

    ``logits`` is [B, T, C]. L2 is scored on ``dec_mask`` (visits plus the
    end token); L1 on the visit positions only.
    """
    probs = ops.softmax(logits)
    l1 = regression_loss_l1(probs, cost_vector, batch.target_costs, batch.visit_mask)
    l2 = multilabel_loss_l2(ops.transpose(logits, (0, 2, 1)), batch.dec_out, batch.dec_mask)
    return l1, l2, combined_loss(l1, l2)


def m1_loss(logits, batch):
    return multilabel_loss_l2(ops.transpose(logits, (0, 2, 1)), batch.dec_out, batch.dec_mask)


# -- evaluation -----------------------------------------------------------

def true_label_ranks(scores, labels):
    """0-based rank of each true label; ties go to the lower class id.

    Args:
        scores: [N, C] likelihoods (or logits).
        labels: [N] class ids.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValueError("scores must be [N, C] and labels [N]")
    s_true = scores[np.arange(len(labels)), labels][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s_true) | ((scores == s_true) & (ids < labels[:, None]))
    return ahead.sum(axis=1)


def top_k_accuracy(scores, labels, k):
    """Fraction of rows whose true label is among the top ``k`` scores."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("top-k accuracy of an empty target set")
    return float(np.mean(true_label_ranks(scores, labels) < k))


def rmse(l1):
    if l1 < 0:
        raise ValueError("l1 must be >= 0")
    return math.sqrt(l1)


def r_squared(predicted, true):
    """1 - SS_res / SS_tot at the annual-total level; NaN when SS_tot is 0."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if predicted.shape != true.shape or true.ndim != 1:
        raise ValueError("predicted and true must be equal-length vectors")
    if true.size < 2:
        return float("nan")
    ss_tot = float(((true.mean() - true) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(((predicted - true) ** 2).sum()) / ss_tot


def classification_metrics(scores, labels, ks=TOP_K):
    return {f"top{k}": top_k_accuracy(scores, labels, k) for k in ks}


def regression_metrics(predicted_annual, true_annual):
    predicted_annual = np.asarray(predicted_annual, dtype=np.float64)
    true_annual = np.asarray(true_annual, dtype=np.float64)
    l1 = float(np.mean((predicted_annual - true_annual) ** 2)) if true_annual.size else 0.0
    return {"rmse": rmse(l1), "r2": r_squared(predicted_annual, true_annual)}


def cost_summary(predicted_annual, true_annual):
    p = np.asarray(predicted_annual, dtype=np.float64)
    t = np.asarray(true_annual, dtype=np.float64)
    if t.size == 0:
        return {k: 0.0 for k in ("true_total", "pred_total", "true_mean", "pred_mean", "true_median", "pred_median")}
    return {
        "true_total": float(t.sum()),
        "pred_total": float(p.sum()),
        "true_mean": float(t.mean()),
        "pred_mean": float(p.mean()),
        "true_median": float(np.median(t)),
        "pred_median": float(np.median(p)),
    }
