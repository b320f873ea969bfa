"""Figures for comparison reports, rendered to PNG files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

BAR_METRICS = ("nMAE", "nRMSE", "delta_sigma2_loc", "gamma_min")
_METADATA = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_METADATA)
    plt.close(fig)
    return path


def metric_bars(rows: Sequence[dict], path: str | Path, metrics: Sequence[str] = BAR_METRICS) -> Path:
    """One panel per metric, one bar per (model, dataset) row."""
    labels = [f"{r['model']}\n{r['dataset']}" for r in rows]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.4), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        vals = [float(r[m]) if r.get(m) not in (None, "") else 0.0 for r in rows]
        ax.bar(range(len(rows)), vals, color="tab:blue")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, fontsize=7, rotation=30, ha="right")
        ax.set_title(m, fontsize=9)
    fig.tight_layout()
    return _save(fig, Path(path))


def spectra(curves: Sequence[tuple[str, Sequence[float], Sequence[float], Sequence[float]]], path: str | Path) -> Path:
    """Radial power spectra: each curve is ``(label, k, E_true, E_reconstructed)``."""
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    for i, (label, k, e, eh) in enumerate(curves):
        color = f"C{i % 10}"
        if i == 0:
            ax.loglog(k, e, color="black", lw=1.5, label="reference")
        ax.loglog(k, eh, color=color, lw=1.0, ls="--", label=label)
    ax.set_xlabel("wavenumber k")
    ax.set_ylabel("E(k)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(path))
