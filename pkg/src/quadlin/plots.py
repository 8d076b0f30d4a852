"""Minimal SVG rendering of DVH curves and comparison summaries."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_dvh_curves(curves: dict, out_path, title: str = "DVH"):
    """curves: roi -> (dose edges Gy, cumulative volume fraction)."""
    fig, ax = plt.subplots(figsize=(7, 5))
    for roi, (edges, frac) in sorted(curves.items()):
        ax.plot(edges, 100.0 * frac, label=roi)
    ax.set_xlabel("Dose (Gy)")
    ax.set_ylabel("Volume (%)")
    ax.set_title(title)
    ax.set_ylim(0, 102)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_diff_bands(summaries: dict, out_path, title: str = "DVH point differences"):
    """summaries: source label -> {point kind -> quartile summary dict}."""
    kinds = sorted({k for s in summaries.values() for k in s})
    fig, ax = plt.subplots(figsize=(7, 5))
    width = 0.8 / max(len(summaries), 1)
    for j, (label, summary) in enumerate(sorted(summaries.items())):
        xs, med, q1, q3, lo, hi = [], [], [], [], [], []
        for i, kind in enumerate(kinds):
            if kind not in summary:
                continue
            s = summary[kind]
            xs.append(i + j * width)
            med.append(s["median"])
            q1.append(s["q1"])
            q3.append(s["q3"])
            lo.append(s["min"])
            hi.append(s["max"])
        ax.vlines(xs, lo, hi, alpha=0.4)
        ax.vlines(xs, q1, q3, linewidth=6, alpha=0.6)
        ax.plot(xs, med, "o", label=label)
    ax.axhline(0.0, color="k", linestyle="--", linewidth=0.8)
    ax.set_xticks(range(len(kinds)))
    ax.set_xticklabels(kinds)
    ax.set_ylabel("Difference (Gy)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
