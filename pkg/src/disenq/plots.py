"""Image emission for evaluation and training artifacts (CMC and loss
curves). Pure output files; uses the Agg backend so no display is needed."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_cmc(report_dict: dict, path) -> Path:
    """CMC curve from a retrieval report's per-probe rankings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ranks = [r["first_correct_rank"] for r in report_dict.get("per_probe", [])
             if "first_correct_rank" in r]
    fig, ax = plt.subplots(figsize=(5, 4))
    if ranks:
        ranks = np.asarray(ranks)
        max_rank = int(ranks.max())
        ks = np.arange(1, max_rank + 1)
        cmc = [(ranks <= k).mean() for k in ks]
        ax.plot(ks, cmc, marker="o", markersize=3)
    ax.set_xlabel("rank k")
    ax.set_ylabel("identification rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"CMC — {report_dict.get('protocol', '')} "
                 f"[{report_dict.get('feature_mode', '')}]")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(history: list, path) -> Path:
    """Per-epoch loss-component curves from training records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    if history:
        epochs = [r["epoch"] for r in history]
        for key in sorted(k for k in history[0] if k not in ("epoch", "num_batches")):
            ax.plot(epochs, [r.get(key, np.nan) for r in history], label=key)
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
