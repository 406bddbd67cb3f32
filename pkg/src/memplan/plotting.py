"""Log-log memory-versus-size figure for benchmark rows."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_rows(rows, path, title: str = "") -> Path:
    """One line per strategy: feature-map bytes against workload size, both axes logarithmic."""
    series = defaultdict(list)
    for r in rows:
        series[r.strategy].append((r.n, r.feature_map_bytes))
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for strategy in sorted(series):
        pts = sorted(series[strategy])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=strategy)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("feature-map bytes")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
