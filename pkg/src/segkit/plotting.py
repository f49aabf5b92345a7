"""PNG figures written next to the CSV/JSON outputs (headless Agg backend)."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_loss(records: Sequence[dict], path, gate: Optional[float] = None) -> None:
    """Loss (left axis) and pixel-accuracy estimate (right axis) against iteration."""
    its = [r["iter"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(its, [r["loss"] for r in records], color="tab:blue", lw=1.2, label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy", color="tab:blue")
    acc = [r.get("pixel_acc_estimate") for r in records]
    if any(a is not None for a in acc):
        ax2 = ax.twinx()
        ax2.plot(its, acc, color="tab:orange", lw=1.0, label="pixel acc")
        ax2.set_ylabel("train pixel accuracy", color="tab:orange")
        ax2.set_ylim(0, 1.02)
        if gate is not None:
            ax2.axhline(gate, color="tab:orange", ls=":", lw=0.8)
    ax.set_title("training")
    _save(fig, path)


def plot_bench(records, path) -> None:
    """Log-log wall time per kernel against token count."""
    fig, ax = plt.subplots(figsize=(6, 3.8))
    kernels = list(dict.fromkeys(r.kernel for r in records))
    for k in kernels:
        pts = sorted((r.N, r.ns_median) for r in records if r.kernel == k and not math.isnan(r.ns_median))
        if pts:
            ax.plot([p[0] for p in pts], [p[1] / 1e6 for p in pts], marker="o", label=k)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("tokens N")
    ax.set_ylabel("median time (ms)")
    ax.grid(True, which="both", lw=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_iou(per_class: Sequence[Optional[float]], path, title: str = "per-class IoU") -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(per_class) + 2), 3.4))
    vals = [0.0 if v is None else v for v in per_class]
    colors = ["lightgray" if v is None else "tab:green" for v in per_class]
    ax.bar(range(len(vals)), vals, color=colors)
    ax.set_xticks(range(len(vals)))
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    _save(fig, path)
