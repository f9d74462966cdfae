"""Vector-graphics summaries of metric streams.

Two chart families: accuracy trajectories over classes seen (one line per
method, dashed when the method zaps) and final pretrain/transfer accuracy
bars with standard-deviation error bars.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def _style(i, zap):
    return {"color": _COLORS[i % len(_COLORS)], "linestyle": "--" if zap else "-"}


def plot_trajectories(runs, out_path):
    """Train-so-far and held-out accuracy vs classes seen.

    ``runs`` is a list of dicts: {label, zap (bool), rows (metric rows)}.
    """
    if not runs:
        raise ValueError("no metric rows to plot")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    plotted = 0
    for i, run in enumerate(runs):
        rows = [r for r in run["rows"] if r.get("record") == "metrics"
                and r.get("phase", "").startswith("transfer")]
        if not rows:
            continue
        plotted += 1
        xs = [r["classes_seen"] if r["phase"] == "transfer_sequential" else r["step"]
              for r in rows]
        style = _style(i, run.get("zap", False))
        axes[0].plot(xs, [r["train_acc"] for r in rows], label=run["label"], **style)
        axes[1].plot(xs, [r["test_acc"] for r in rows], label=run["label"], **style)
    for ax, title in zip(axes, ("train-so-far", "held-out")):
        ax.set_xlabel("classes seen")
        ax.set_ylabel("accuracy")
        ax.set_title(title)
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
    if plotted:
        axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def final_bar_stats(groups):
    """(means, stds) per group for the pretrain and transfer bars.

    Error bars are the sample standard deviation of the provided finals.
    """
    pre_m = [float(np.mean(g["pretrain_accs"])) for g in groups]
    pre_s = [float(np.std(g["pretrain_accs"])) for g in groups]
    tr_m = [float(np.mean(g["transfer_accs"])) for g in groups]
    tr_s = [float(np.std(g["transfer_accs"])) for g in groups]
    return pre_m, pre_s, tr_m, tr_s


def plot_finals(groups, out_path):
    """Pretrain vs transfer final accuracy bars with std-dev error bars.

    ``groups`` is a list of dicts: {label, zap, pretrain_accs, transfer_accs}.
    """
    if not groups:
        raise ValueError("no summaries to plot")
    fig, ax = plt.subplots(figsize=(1.6 * len(groups) + 3, 4))
    width = 0.38
    xs = np.arange(len(groups))
    pre_m, pre_s, tr_m, tr_s = final_bar_stats(groups)
    ax.bar(xs - width / 2, pre_m, width, yerr=pre_s, capsize=3, label="pretrain")
    ax.bar(xs + width / 2, tr_m, width, yerr=tr_s, capsize=3, label="transfer")
    ax.set_xticks(xs)
    ax.set_xticklabels([g["label"] for g in groups], rotation=20, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
