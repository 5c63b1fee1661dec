"""Figure rendering for evaluation reports.

The CSV files are the source of truth; figures are a readable view written
next to them, in both SVG and PNG.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_sweep(report, base_path: str | Path) -> list[Path]:
    """Line chart of accuracy vs K_test, one line per config label."""
    base_path = Path(base_path)
    labels = []
    for row in report.rows:
        if row.label not in labels:
            labels.append(row.label)

    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label in labels:
        rows = sorted(
            (r for r in report.rows if r.label == label), key=lambda r: r.k_test
        )
        ks = [r.k_test for r in rows]
        means = [r.mean_accuracy for r in rows]
        stds = [r.std_accuracy for r in rows]
        ax.errorbar(ks, means, yerr=stds, marker="o", capsize=3, label=label)
    ax.set_xlabel("shots per class at test time (K_test)")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("few-shot accuracy vs test-time shots")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()

    paths = [base_path.with_suffix(".svg"), base_path.with_suffix(".png")]
    for path in paths:
        fig.savefig(path)
    plt.close(fig)
    return paths
