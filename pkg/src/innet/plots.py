"""Figure rendering for run reports: accuracy curves to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

SCHEME_COLORS = {"inl": "tab:blue", "fl": "tab:orange", "sl": "tab:green"}


def save_accuracy_curves(series: dict[str, tuple[list, list]], path, x_label: str, title: str) -> None:
    """One line per scheme; series maps scheme -> (x values, accuracies)."""
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    for scheme, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker=".", markersize=3, label=scheme, color=SCHEME_COLORS.get(scheme))
    ax.set_xlabel(x_label)
    ax.set_ylabel("test accuracy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
