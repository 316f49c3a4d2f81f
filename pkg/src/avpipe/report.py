"""Figure rendering for sweep curves, cost ledgers, and training traces.

Figures are written next to the delimited output they visualize; the Agg
backend keeps rendering headless.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import CostLedger
from .sweep import CurveRow

_METHOD_ORDER = ("per_frame", "dff", "fgfa", "c1", "c2", "c3")


def _method_of(label: str) -> str:
    return label.split(":", 1)[0]


def save_tradeoff_figure(rows: Sequence[CurveRow], path, title: str = "Cost vs accuracy") -> None:
    """Accuracy-proxy against mean modeled cost, one series per method."""
    fig, ax = plt.subplots(figsize=(7, 5))
    seen = {}
    for row in rows:
        seen.setdefault(_method_of(row.label), []).append(row)
    ordered = [m for m in _METHOD_ORDER if m in seen] + [
        m for m in seen if m not in _METHOD_ORDER
    ]
    for method in ordered:
        pts = sorted(seen[method], key=lambda r: r.mean_cost)
        xs = [r.mean_cost for r in pts]
        ys = [r.accuracy_proxy for r in pts]
        ax.plot(xs, ys, marker="o", label=method)
        for r in pts:
            suffix = r.label.split(":", 1)[1] if ":" in r.label else ""
            if suffix:
                ax.annotate(suffix, (r.mean_cost, r.accuracy_proxy), fontsize=7,
                            xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("mean modeled cost per frame (MACs)")
    ax.set_ylabel("accuracy proxy (hit rate @ IoU 0.5)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ledger_figure(ledger: CostLedger, path, title: str = "Per-frame cost") -> None:
    """Stacked per-frame cost components, key frames marked, recompute
    fraction on the twin axis."""
    frames = [r.frame for r in ledger.records]
    feat = np.array([r.feat_cost for r in ledger.records])
    flow = np.array([r.flow_cost for r in ledger.records])
    aggr = np.array([r.aggr_cost for r in ledger.records])
    det = np.array([r.det_cost for r in ledger.records])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar(frames, feat, label="feature", color="#4878d0")
    ax.bar(frames, flow, bottom=feat, label="flow", color="#ee854a")
    ax.bar(frames, aggr, bottom=feat + flow, label="aggregation", color="#6acc64")
    ax.bar(frames, det, bottom=feat + flow + aggr, label="detection", color="#d65f5f")
    for r in ledger.records:
        if r.is_key:
            ax.axvline(r.frame, color="black", alpha=0.25, linewidth=0.8)
    ax.set_xlabel("frame (vertical lines: key frames)")
    ax.set_ylabel("modeled cost (MACs)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(frames, [r.recompute_fraction for r in ledger.records],
             color="purple", linewidth=1.2, label="recompute fraction")
    ax2.set_ylabel("recompute fraction", color="purple")
    ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(trace: Sequence[dict], path, title: str = "Training trace") -> None:
    steps = [t["step"] for t in trace]
    losses = np.array([t["loss"] for t in trace])
    fractions = [t["mask_fraction"] for t in trace]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(steps, losses, alpha=0.35, linewidth=0.7, label="loss")
    if len(losses) >= 20:
        k = max(len(losses) // 50, 5)
        kernel = np.ones(k) / k
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[k - 1 :], smooth, linewidth=1.6, label=f"loss (mean over {k})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax2 = ax.twinx()
    ax2.plot(steps, fractions, color="purple", alpha=0.5, linewidth=0.8)
    ax2.set_ylabel("recompute fraction", color="purple")
    ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sequence_preview(frames: Sequence[np.ndarray], path, max_frames: int = 8) -> None:
    """Filmstrip preview of generated frames."""
    n = min(len(frames), max_frames)
    picks = np.linspace(0, len(frames) - 1, n).astype(int)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 2.0))
    if n == 1:
        axes = [axes]
    for ax, idx in zip(axes, picks):
        ax.imshow(np.clip(frames[idx], 0.0, 1.0))
        ax.set_title(f"t={idx}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
