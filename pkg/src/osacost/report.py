"""Assemble per-cell metrics into the arm x model x split grid and render it."""

from __future__ import annotations

import math

ARM_NAMES = {"original": "Original", "random": "Random aug.", "m1": "M1 aug."}
MODEL_NAMES = {
    "transformer": "Transformer",
    "lstm": "LSTM",
    "lstm_attn": "LSTM+attn",
    "bilstm": "BiLSTM",
    "bilstm_attn": "BiLSTM+attn",
}
SPLITS = ("train", "val", "test")
METRICS = ("top3", "top5", "top10", "rmse", "r2")


def _clean(x):
    if isinstance(x, float):
        return None if math.isnan(x) else round(x, 6)
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    return x


def build_report(cells, m1=None):
    """``cells`` maps (arm, model) to that cell's metrics dict or None."""
    grid, costs = {}, {}
    for arm in ARM_NAMES:
        grid[arm], costs[arm] = {}, {}
        for model in MODEL_NAMES:
            cell = cells.get((arm, model))
            if cell is None:
                grid[arm][model] = {"status": "missing"}
                costs[arm][model] = {"status": "missing"}
                continue
            grid[arm][model] = {s: {m: _clean(cell[s][m]) for m in METRICS} for s in SPLITS}
            costs[arm][model] = _clean(dict(cell["test"]["costs"]))
    return {
        "shape": [len(ARM_NAMES), len(MODEL_NAMES), len(SPLITS), len(METRICS)],
        "m1": _clean(m1) if m1 else {"status": "missing"},
        "grid": grid,
        "test_costs": costs,
    }


def _pct(x):
    return "-" if x is None else f"{100 * x:.2f}"


def _num(x, fmt):
    return "-" if x is None else format(x, fmt)


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    out = [line(header), "  ".join("-" * w for w in widths)]
    out.extend(line(r) for r in rows)
    return "\n".join(out)


def render_table(report):
    """Plain-text rendering: next-visit top-k, the cost-model grid, cost totals."""
    parts = []
    m1 = report["m1"]
    if "status" not in m1:
        rows = [[s] + [_pct(m1[s].get(k)) for k in ("top3", "top5", "top10")] for s in SPLITS]
        parts.append("Next-visit model (M1) top-k accuracy, %\n" + _table(["split", "Top3", "Top5", "Top10"], rows))
    for split in SPLITS:
        rows = []
        for arm, arm_label in ARM_NAMES.items():
            for model, label in MODEL_NAMES.items():
                cell = report["grid"][arm][model]
                if "status" in cell:
                    rows.append([label, arm_label] + ["n/a"] * 5)
                    continue
                c = cell[split]
                rows.append([label, arm_label, _pct(c["top3"]), _pct(c["top5"]), _pct(c["top10"]),
                             _num(c["rmse"], ".2f"), _num(c["r2"], ".3f")])
        parts.append(f"Cost model, {split} split\n" + _table(["model", "arm", "Top3", "Top5", "Top10", "RMSE", "R2"], rows))
    rows = []
    for arm, arm_label in ARM_NAMES.items():
        for model, label in MODEL_NAMES.items():
            c = report["test_costs"][arm][model]
            if "status" in c:
                rows.append([label, arm_label] + ["n/a"] * 6)
                continue
            rows.append([
                label, arm_label,
                f"{round(c['true_total']):,}", f"{round(c['pred_total']):,}",
                f"{c['true_mean']:.2f}", f"{c['pred_mean']:.2f}",
                f"{c['true_median']:.2f}", f"{c['pred_median']:.2f}",
            ])
    parts.append("Test-set annual costs, EUR\n" + _table(
        ["model", "arm", "true total", "pred total", "true mean", "pred mean", "true median", "pred median"], rows))
    return "\n\n".join(parts) + "\n"
