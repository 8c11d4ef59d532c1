"""Figures rendered next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .defense import REJECT  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_curves(curves, path):
    """Accuracy and rejection rate against epsilon, one line per detector."""
    fig, (ax_acc, ax_rej) = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for c in curves:
        ax_acc.errorbar(c.epsilons, c.accuracy_mean, yerr=c.accuracy_std, marker="o", ms=3,
                        capsize=2, label=c.detector)
        ax_rej.plot(c.epsilons, c.rejection_mean, marker="o", ms=3, label=c.detector)
    setting = curves[0].setting.value.replace("_", "-") if curves else ""
    ax_acc.set(xlabel="epsilon", ylabel="accuracy", ylim=(-0.02, 1.02), title=f"{setting} accuracy")
    ax_rej.set(xlabel="epsilon", ylabel="rejection rate", ylim=(-0.02, 1.02), title=f"{setting} rejection")
    for ax in (ax_acc, ax_rej):
        ax.grid(alpha=0.3)
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_benchmark(rows, path):
    """Prototype totals per detector (log scale), annotated with latency when measured."""
    totals = {}
    latency = {}
    for r in rows:
        totals[r.detector] = r.total
        latency[r.detector] = r.latency_us_mean
    names = list(totals)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 3, 4))
    bars = ax.bar(names, [totals[n] for n in names], color="tab:blue")
    ax.set_yscale("log")
    ax.set_ylabel("prototypes (total)")
    for b, n in zip(bars, names):
        label = f"{totals[n]}"
        if np.isfinite(latency[n]):
            label += f"\n{latency[n]:.0f} us"
        ax.annotate(label, (b.get_x() + b.get_width() / 2, b.get_height()), ha="center", va="bottom", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_decision_regions(models, X, y, path, steps=200, margin=0.5):
    """Predicted class (and reject) over a grid, one panel per model; 2-D inputs only."""
    X = np.asarray(X)
    lo = X.min(0) - margin
    hi = X.max(0) + margin
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], steps), np.linspace(lo[1], hi[1], steps))
    G = np.column_stack([gx.ravel(), gy.ravel()])
    fig, axes = plt.subplots(1, len(models), figsize=(4 * len(models), 4), squeeze=False)
    for ax, (name, m) in zip(axes[0], models.items()):
        pred = m.predict(G).reshape(gx.shape)
        n_cls = int(m.n_classes)
        cmap = plt.get_cmap("tab10", n_cls + 1)
        ax.contourf(gx, gy, pred, levels=np.arange(-0.5, n_cls + 1), cmap=cmap, alpha=0.35)
        ax.contour(gx, gy, (pred == REJECT).astype(float), levels=[0.5], colors="k", linewidths=0.8)
        ax.scatter(X[:, 0], X[:, 1], c=y + 1, cmap=cmap, vmin=-0.5, vmax=n_cls + 0.5, s=6, edgecolors="none")
        ax.set_title(name, fontsize=9)
        ax.set_aspect("equal")
    fig.suptitle("decision regions; black contour bounds the reject region", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)
