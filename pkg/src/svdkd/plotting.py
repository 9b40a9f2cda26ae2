"""Optional figures next to the CSV outputs.

Only used when a CLI command is given ``--figure``. matplotlib is imported
lazily and drawn through the object API, so no global pyplot state is touched.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from svdkd.errors import ArgumentError, IoError


def _figure(width: float = 7.0, height: float = 3.0, ncols: int = 1):
    try:
        from matplotlib.figure import Figure
    except ImportError:
        raise ArgumentError("--figure needs matplotlib; install the 'plot' extra") from None
    fig = Figure(figsize=(width, height))
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    for ax in axes:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, axes


def _save(fig, path: str | Path) -> None:
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None} if str(path).endswith(".png") else None)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def spectrum_figure(singular_values: np.ndarray, cumulative: np.ndarray, importance: np.ndarray, path: str | Path) -> None:
    """Singular values (log scale), cumulative explained variance and per-dimension importance."""
    fig, (ax0, ax1, ax2) = _figure(11.0, 3.0, ncols=3)
    k = np.arange(1, singular_values.size + 1)
    ax0.semilogy(k, np.maximum(singular_values, np.finfo(float).tiny), lw=1.2)
    ax0.set_xlabel("component")
    ax0.set_ylabel("singular value")
    ax1.plot(k, cumulative, lw=1.2)
    ax1.axhline(0.9, color="0.6", lw=0.8, ls="--")
    ax1.set_xlabel("component")
    ax1.set_ylabel("cumulative explained variance")
    ax1.set_ylim(0, 1.02)
    ax2.bar(np.arange(importance.size), np.sort(importance)[::-1], width=1.0)
    ax2.set_xlabel("dimension (sorted)")
    ax2.set_ylabel("importance")
    _save(fig, path)


def loss_figure(steps: np.ndarray, curves: dict[str, np.ndarray], path: str | Path) -> None:
    fig, (ax,) = _figure()
    for name, values in curves.items():
        ax.plot(steps, values, lw=1.0, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    _save(fig, path)
