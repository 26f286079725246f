"""Figure rendering: loss curves, per-task metric bars, and mask overlays.

matplotlib is imported lazily with the Agg backend so the package stays
usable headless and the dependency is only touched when figures are asked
for.  PNGs are written with the Software metadata chunk suppressed, so
re-rendering from the same inputs yields byte-identical files.
"""

from __future__ import annotations

import os

import numpy as np

from .geometry import boundary_pixels

PRED_COLOR = (0.85, 0.10, 0.10)
GT_COLOR = (0.10, 0.25, 0.90)

_PNG_META = {"Software": None}  # None suppresses the version stamp
_PHASE_TITLES = {
    "meta": "episodic meta-training",
    "baaf": "fine-tuning: generator",
    "baaf_disc": "fine-tuning: discriminator",
}
_COMPONENT_KEYS = ("bce_term", "hd_term", "dice_term", "adv_term")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, out_path):
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    fig.savefig(out_path, dpi=120, metadata=dict(_PNG_META))
    _plt().close(fig)
    return out_path


def plot_loss_curves(loss_history, out_path):
    """One panel per phase present in the history, x = global step.

    Component curves (bce/hd/dice/adv) are drawn when every record of the
    phase carries them; totals are always drawn.
    """
    plt = _plt()
    phases = [p for p in _PHASE_TITLES
              if any(r.get("phase") == p for r in loss_history)]
    if not phases:
        raise ValueError("loss history holds no plottable records")
    fig, axes = plt.subplots(
        1, len(phases), figsize=(4.8 * len(phases), 3.2), squeeze=False
    )
    for ax, phase in zip(axes[0], phases):
        recs = [r for r in loss_history if r.get("phase") == phase]
        xs = [r.get("step", i) for i, r in enumerate(recs)]
        ax.plot(xs, [r["total"] for r in recs], lw=1.0, color="#333333",
                label="total")
        for key in _COMPONENT_KEYS:
            if all(key in r for r in recs):
                ax.plot(xs, [r[key] for r in recs], lw=0.8, alpha=0.75,
                        label=key[:-5])
        ax.set_title(_PHASE_TITLES[phase], fontsize=9)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_task_bars(rows, out_path):
    """Per-task DSC and HD95 bars with dashed task-mean lines.

    ``rows`` is any sequence exposing patient_id / dsc_mean / hd95_mean,
    e.g. MetricsReport.rows.
    """
    plt = _plt()
    rows = list(rows)
    if not rows:
        raise ValueError("no task rows to plot")
    ids = [r.patient_id for r in rows]
    dsc = [r.dsc_mean for r in rows]
    hd = [r.hd95_mean for r in rows]
    x = np.arange(len(ids))
    width = max(6.4, 1.1 * len(ids) + 3.0)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(width, 3.2))
    ax1.bar(x, dsc, color="#2ca02c")
    ax1.axhline(float(np.mean(dsc)), color="#333333", lw=0.8, ls="--",
                label=f"mean {np.mean(dsc):.3f}")
    ax1.set_ylim(0.0, 1.05)
    ax1.set_ylabel("DSC")
    ax2.bar(x, hd, color="#d62728")
    ax2.axhline(float(np.mean(hd)), color="#333333", lw=0.8, ls="--",
                label=f"mean {np.mean(hd):.3f}")
    ax2.set_ylabel("HD95 (px)")
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=7)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def overlay_masks(image, pred_mask=None, gt_mask=None):
    """RGB overlay: predicted boundary in red, ground truth in blue.

    Accepts an HxW or HxWx3 image in [0, 1]; returns HxWx3 float64.  The
    prediction is painted last so it stays visible where contours touch.
    """
    base = np.asarray(image, dtype=np.float64)
    if base.ndim == 2:
        base = np.repeat(base[:, :, None], 3, axis=2)
    out = np.clip(base.copy(), 0.0, 1.0)
    if gt_mask is not None:
        pts = boundary_pixels(gt_mask)
        out[pts[:, 0], pts[:, 1]] = GT_COLOR
    if pred_mask is not None:
        pts = boundary_pixels(pred_mask)
        out[pts[:, 0], pts[:, 1]] = PRED_COLOR
    return out


def save_overlay_grid(images, pred_masks, gt_masks, out_path,
                      titles=None, cols: int = 4):
    """Grid of qualitative overlays, one tile per slice.

    ``gt_masks`` may be None or hold None entries for slices without
    ground truth; those tiles show the prediction alone.
    """
    plt = _plt()
    n = len(images)
    if n == 0:
        raise ValueError("no slices to render")
    if gt_masks is None:
        gt_masks = [None] * n
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.4 * rows),
                             squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i >= n:
            continue
        ax.imshow(overlay_masks(images[i], pred_masks[i], gt_masks[i]),
                  interpolation="nearest")
        if titles is not None:
            ax.set_title(str(titles[i]), fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)
