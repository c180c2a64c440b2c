"""Report figures, rendered headlessly next to the CSVs they summarize.

Every plot reads the same delimited artifacts the pipeline writes, so a
figure can always be regenerated from a finished output tree without
re-running any training.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .errors import ValidationError  # noqa: E402


def _read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines:
        raise ValidationError(f"{path}: empty csv")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def plot_training_curve(loss_csv, val_csv, out_png):
    """Stage-1 loss terms over epochs with validation Dice on a twin axis."""
    header, rows = _read_csv(loss_csv)
    cols = {h: np.array([float(r[i]) for r in rows])
            for i, h in enumerate(header)}
    _, vrows = _read_csv(val_csv)
    vx = np.array([float(r[0]) for r in vrows])
    vy = np.array([float(r[1]) for r in vrows])

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in ("psup", "mcrf", "vm", "total"):
        if name in cols and np.isfinite(cols[name]).any():
            ax.plot(cols["epoch"], cols[name], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(vx, vy, "k--", marker=".", label="val dice")
    ax2.set_ylabel("validation Dice")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_scm_curve(scm_csv, val_csv, out_png):
    """Stage-2 self/distillation terms per role with validation Dice."""
    header, rows = _read_csv(scm_csv)
    cols = {h: np.array([float(r[i]) for r in rows])
            for i, h in enumerate(header)}
    _, vrows = _read_csv(val_csv)
    vx = np.array([float(r[0]) for r in vrows])

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in ("kd_a", "self_a", "kd_b", "self_b"):
        if np.isfinite(cols[name]).any():
            ax.plot(cols["epoch"], cols[name], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(vx, [float(r[1]) for r in vrows], "k--", marker=".", label="dice a")
    ax2.plot(vx, [float(r[2]) for r in vrows], "k:", marker=".", label="dice b")
    ax2.set_ylabel("validation Dice")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_expansion(expansion_csv, out_png):
    """Mean seed-expansion precision and recall against the threshold grid."""
    _, rows = _read_csv(expansion_csv)
    eps = sorted({float(r[1]) for r in rows})
    prec = [np.mean([float(r[2]) for r in rows if float(r[1]) == e]) for e in eps]
    rec = [np.mean([float(r[3]) for r in rows if float(r[1]) == e]) for e in eps]

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(eps, prec, marker="o", label="precision")
    ax.plot(eps, rec, marker="s", label="recall")
    ax.set_xlabel("expansion threshold fraction")
    ax.set_ylabel("mean over training cases")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_report_bars(rows, out_png):
    """Test Dice per arm (mean ± std across cases)."""
    labels = [f"{r['arm']}\n{r['model']}" for r in rows]
    means = [r["dice_mean"] for r in rows]
    stds = [r["dice_std"] for r in rows]

    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 4))
    xs = np.arange(len(rows))
    ax.bar(xs, means, yerr=stds, capsize=3, color="#4878cf")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("test Dice")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_report_figures(ws, rows, labels_dir=None, stage1_runs=None):
    """All figures for a finished run, into the workspace figure directory."""
    os.makedirs(ws.figure_dir, exist_ok=True)
    if rows:
        plot_report_bars(rows, os.path.join(ws.figure_dir, "report_dice.png"))
    if labels_dir:
        exp_csv = os.path.join(labels_dir, "expansion.csv")
        if os.path.exists(exp_csv):
            plot_expansion(exp_csv, os.path.join(ws.figure_dir, "expansion.png"))
    for (arm, arch, rep), (d, _key) in (stage1_runs or {}).items():
        plot_training_curve(
            os.path.join(d, "loss_curve.csv"), os.path.join(d, "val_curve.csv"),
            os.path.join(ws.figure_dir, f"stage1_{arm}_{arch}_{rep}.png"))
