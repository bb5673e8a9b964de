"""Figure rendering for the CLI report paths.

Every command that emits a machine-readable document also renders a small
matplotlib figure next to it; the data files stay the source of truth and
the figures are a quick visual check.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .graph import BUCKET_LABELS  # noqa: E402


def save_stats_figure(interval, repeat, path):
    """Interval-bucket bar chart plus repeat-behavior histograms."""
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
    ax = axes[0]
    ax.bar(range(len(interval.counts)), interval.counts, color="#4878d0")
    ax.set_xticks(range(len(BUCKET_LABELS)))
    ax.set_xticklabels(BUCKET_LABELS, rotation=30, ha="right", fontsize=8)
    ax.set_title("consecutive intervals")
    ax.set_ylabel("count")

    for ax, data, title in (
            (axes[1], repeat.max_repeats_per_student, "max repeats / student"),
            (axes[2], repeat.mean_repeats_per_student, "mean repeats / student"),
            (axes[3], repeat.attempts_before_success, "attempts before success")):
        if len(data):
            ax.hist(data, bins=min(20, max(3, len(np.unique(data)))),
                    color="#6acc64", density=True)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(records, path):
    epochs = [r.epoch for r in records]
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(epochs, [r.train_loss for r in records], "o-", color="#d65f5f",
             label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="#d65f5f")
    ax2 = ax1.twinx()
    val = [(r.epoch, r.val_auc) for r in records if np.isfinite(r.val_auc)]
    if val:
        ax2.plot([e for e, _ in val], [a for _, a in val], "s-", color="#4878d0",
                 label="val AUC")
    ax2.set_ylabel("val AUC", color="#4878d0")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trace_figure(trace, path):
    """Mastery probability over steps, intervals and repeat-links annotated."""
    steps = trace.steps
    xs = [s.step for s in steps]
    ps = [s.probability for s in steps]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(steps)), 3.2))
    ax.plot(xs, ps, "-", color="#4878d0", zorder=1)
    colors = {0: "#c0c0c0", 1: "#6acc64", 2: "#1a7a1a"}
    for s in steps:
        ax.scatter([s.step], [s.probability], s=70, zorder=2,
                   color=colors[s.multiset_flag],
                   edgecolors="black", linewidths=0.5)
        ax.annotate(s.gap_bucket, (s.step, 0.02), fontsize=6, rotation=90,
                    ha="center")
    ax.set_ylim(0, 1)
    ax.set_xlabel("step")
    ax.set_ylabel(f"P(correct on question {trace.question})")
    ax.set_title(f"student {trace.student}, question {trace.question} "
                 f"(concept {trace.target_concept})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(rows, param_name, path):
    """rows: (value, trans_ap, trans_auc, ind_ap, ind_auc, error) tuples."""
    ok = [r for r in rows if r[5] is None]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if ok:
        xs = [r[0] for r in ok]
        ax.plot(xs, [r[2] for r in ok], "o-", label="transductive AUC")
        ax.plot(xs, [r[1] for r in ok], "s--", label="transductive AP")
    ax.set_xlabel(param_name)
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
