"""Figure rendering for experiment reports.

Every runner's delimited output gets a companion PNG here.  The CSVs stay the
canonical artifact; these are the quick-look figures written alongside them.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_VARIANT_COLORS = {"real": "tab:blue", "randX": "tab:red", "randY": "tab:green"}


def _color(label):
    base = label.split("@")[0]
    return _VARIANT_COLORS.get(base)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_easy_hard(path, rates, binomial_rates=None):
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for variant, rate in rates.items():
        ax.plot(np.sort(rate), label=variant, color=_color(variant))
    if binomial_rates is not None:
        ax.plot(np.sort(binomial_rates), "k--", alpha=0.6, label="binomial reference")
    ax.set_xlabel("examples, sorted by difficulty")
    ax.set_ylabel("misclassification rate after 1 epoch")
    ax.legend()
    return _save(fig, path)


def plot_gini_curves(path, curves):
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    for variant, curve in curves.items():
        steps = [s for s, _ in curve]
        values = [v for _, v in curve]
        ax.plot(steps, values, label=variant, color=_color(variant))
    ax.set_xlabel("SGD step")
    ax.set_ylabel("Gini coefficient of per-example sensitivity")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)


def plot_class_matrices(path, matrices):
    count = max(len(matrices), 1)
    fig, axes = plt.subplots(1, count, figsize=(4.2 * count, 3.8))
    if count == 1:
        axes = [axes]
    for ax, (variant, matrix) in zip(axes, matrices.items()):
        with np.errstate(divide="ignore", invalid="ignore"):
            shown = np.log10(matrix.values)
        im = ax.imshow(shown, cmap="viridis")
        ax.set_title(variant)
        ax.set_xlabel("training example class j")
        ax.set_ylabel("loss class i")
        fig.colorbar(im, ax=ax, label="log10 sensitivity")
    return _save(fig, path)


def plot_capacity(path, noise_grid, hidden_grid, table):
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    for fraction in noise_grid:
        accs = [table.get((fraction, width), np.nan) for width in hidden_grid]
        ax.plot(hidden_grid, accs, marker="o", label=f"noise {fraction:g}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("hidden units per layer")
    ax.set_ylabel("best validation accuracy")
    ax.legend()
    return _save(fig, path)


def plot_ttc(path, axis, axis_values, noise_grid, table):
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    for level in noise_grid:
        xs, ys = [], []
        for value in axis_values:
            outcome = table.get((value, level))
            if outcome and outcome[0]:
                xs.append(value)
                ys.append(outcome[1])
        ax.plot(xs, ys, marker="o", label=f"noise {level:g}")
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("epochs to 100% train accuracy")
    ax.legend()
    return _save(fig, path)


def plot_csr_curves(path, series):
    fig, (ax_acc, ax_csr) = plt.subplots(1, 2, figsize=(10.5, 4.2))
    for label, points in series.items():
        epochs = [p[0] for p in points]
        csr_values = [p[1] for p in points]
        train_acc = [p[2] for p in points]
        val_acc = [p[3] for p in points]
        color = _color(label)
        ax_acc.plot(epochs, train_acc, color=color, label=f"{label} train")
        ax_acc.plot(epochs, val_acc, color=color, linestyle=":", label=f"{label} val")
        ax_csr.plot(epochs, csr_values, color=color, marker="o", markersize=3, label=label)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend(fontsize=8)
    ax_csr.set_xlabel("epoch")
    ax_csr.set_ylabel("critical sample ratio (validation)")
    ax_csr.legend(fontsize=8)
    return _save(fig, path)


def plot_reg_sweep(path, table):
    fig, ax = plt.subplots(figsize=(6.5, 4.8))
    by_kind = {}
    for (kind, param), (randy_acc, val_acc) in sorted(table.items()):
        by_kind.setdefault(kind, []).append((param, randy_acc, val_acc))
    for kind, rows in by_kind.items():
        rows.sort()
        xs = [r[1] for r in rows]
        ys = [r[2] for r in rows]
        if kind == "none":
            ax.scatter(xs, ys, marker="*", s=140, color="black", zorder=5, label="none")
        else:
            ax.plot(xs, ys, marker="o", label=kind)
    ax.set_xlabel("final train accuracy on fully label-noised data")
    ax.set_ylabel("best validation accuracy on real data")
    ax.legend(fontsize=8)
    return _save(fig, path)
