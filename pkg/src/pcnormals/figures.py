"""Matplotlib rendering for report and training outputs.

Figures are written next to the delimited files they illustrate. PNG
metadata is pinned so reruns with identical inputs emit identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

PNG_METADATA = {"Software": "pcnormals"}
FIG_DPI = 150


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def save_pgp_figure(path, curves: list[tuple[str, "np.ndarray"]], mode: str = "unoriented") -> Path:
    """PGP-vs-threshold curves (one line per shape)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, curve in curves:
        ax.plot(range(len(curve)), curve, linewidth=1.5, label=name)
    ax.set_xlabel("angle threshold (deg)")
    ax.set_ylabel("fraction of good points")
    ax.set_title(f"PGP curve ({mode})")
    ax.set_xlim(0, 90)
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3, linewidth=0.5)
    if curves:
        ax.legend(fontsize=8)
    return _save(fig, path)


def save_loss_figure(path, rows: list[dict]) -> Path:
    """Per-step training loss breakdown on a log scale."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    steps = [row["step"] for row in rows]
    for key in ("l1", "l2", "l3", "l4", "l5"):
        ax.plot(steps, [row[key] for row in rows], linewidth=0.8, alpha=0.7, label=key)
    ax.plot(steps, [row["total"] for row in rows], linewidth=1.6, color="black", label="total")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, linewidth=0.5)
    ax.legend(fontsize=8, ncol=3)
    return _save(fig, path)
