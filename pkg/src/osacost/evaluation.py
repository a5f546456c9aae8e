"""Metric computation for trained sequence models."""

from __future__ import annotations

import numpy as np

from .autodiff import no_grad, ops
from .data import TARGET_SPECIALS
from .metrics import TOP_K, classification_metrics, cost_summary, regression_metrics
from .transformer import m2_predict_year

N_SPECIAL = len(TARGET_SPECIALS)


def teacher_forced_outputs(model, dataset, batch_size=256):
    """Probabilities at scored visit positions plus per-patient arrays.

    Returns ``(scores [N, C-specials], labels [N], patient_probs)`` where
    ``patient_probs`` is a list of ([K, C] probs, true annual cost).
    """
    scores, labels, per_patient = [], [], []
    with no_grad():
        for batch in dataset.batches(batch_size):
            p = ops.softmax(model.forward_logits(batch, training=False)).data.astype(np.float64)
            live = batch.visit_mask > 0
            scores.append(p[live][:, N_SPECIAL:])
            labels.append(batch.dec_out[live] - N_SPECIAL)
            for b in range(batch.size):
                k = int(live[b].sum())
                per_patient.append((p[b, :k], float(batch.annual_cost[b])))
    if not scores:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), []
    return np.concatenate(scores), np.concatenate(labels), per_patient


def evaluate_m1(model, dataset, ks=TOP_K):
    scores, labels, _ = teacher_forced_outputs(model, dataset)
    return classification_metrics(scores, labels, ks)


def evaluate_m2(model, dataset, cost_vector, tgt_vocab, free_running=False, ks=TOP_K):
    """Top-k over target visits, RMSE/R2 of expected annual cost, totals.

    Annual predictions sum sum_c p_c e_c over the patient's target visits
    under teacher forcing. With ``free_running`` the greedy decode total
    (stopping at SEP) is reported as well.
    """
    e = np.asarray(cost_vector, dtype=np.float64)
    scores, labels, per_patient = teacher_forced_outputs(model, dataset)
    pred = np.array([float((p @ e).sum()) for p, _ in per_patient])
    true = np.array([t for _, t in per_patient])
    out = classification_metrics(scores, labels, ks)
    out.update(regression_metrics(pred, true))
    out["n_patients"] = len(per_patient)
    out["n_visits"] = int(len(labels))
    out["costs"] = cost_summary(pred, true)
    if free_running:
        free = []
        for batch in dataset.batches(256):
            free.extend(y.annual_total for y in m2_predict_year(model, batch, tgt_vocab, e))
        out["costs"]["pred_total_free_running"] = float(np.sum(free))
        out["r2_free_running"] = regression_metrics(np.array(free), true)["r2"]
    return out
