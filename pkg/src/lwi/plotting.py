"""PNG figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps re-rendered files byte-identical
_META = {"Software": None}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def acf_figure(acf: np.ndarray, pacf: np.ndarray, band: float, title: str,
               path: Union[str, Path]) -> Path:
    """Stem plots of ACF and PACF with the +-band significance lines."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5), sharey=True)
    lags = np.arange(len(acf))
    for ax, vals, name in ((axes[0], acf, "ACF"), (axes[1], pacf, "PACF")):
        ax.vlines(lags[1:], 0, vals[1:], color="tab:blue")
        ax.plot(lags[1:], vals[1:], "o", ms=3, color="tab:blue")
        ax.axhline(0, color="black", lw=0.8)
        ax.axhspan(-band, band, color="tab:blue", alpha=0.15)
        ax.set_title(f"{title} {name}")
        ax.set_xlabel("lag (bins)")
    fig.tight_layout()
    return _save(fig, path)


def forecast_figure(timestamp: np.ndarray, y_true: np.ndarray, y_pred: np.ndarray,
                    title: str, path: Union[str, Path], max_points: int = 2000) -> Path:
    """Actual vs predicted target over (the start of) one test block."""
    n = min(len(y_true), max_points)
    t = (np.asarray(timestamp[:n]) - timestamp[0]) / 1e9
    fig, ax = plt.subplots(figsize=(10, 3.5))
    ax.plot(t, y_true[:n], lw=0.7, color="0.4", label="actual")
    ax.plot(t, y_pred[:n], lw=1.0, color="tab:red", label="forecast")
    ax.set_xlabel("seconds into test block")
    ax.set_ylabel("LWI target")
    ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    return _save(fig, path)


def residual_figure(residuals: Dict[str, np.ndarray], title: str,
                    path: Union[str, Path], bins: int = 80) -> Path:
    """Overlaid residual histograms, one per label (e.g. per horizon)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    finite = [r[np.isfinite(r)] for r in residuals.values() if len(r)]
    if finite:
        lo = min(np.quantile(r, 0.001) for r in finite)
        hi = max(np.quantile(r, 0.999) for r in finite)
        edges = np.linspace(lo, hi, bins + 1)
        for label, r in residuals.items():
            if len(r):
                ax.hist(r, bins=edges, histtype="step", density=True, label=label)
        ax.legend()
    ax.set_xlabel("residual (actual - forecast)")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def summary_figure(mean_r2: Dict[str, Sequence[float]], labels: Sequence[str], title: str,
                   path: Union[str, Path]) -> Path:
    """Mean R² against horizon, one line per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(labels))
    for model, vals in mean_r2.items():
        ax.plot(x, vals, marker="o", label=model)
    ax.set_xticks(x, labels)
    ax.axhline(0, color="black", lw=0.8)
    ax.set_xlabel("horizon")
    ax.set_ylabel("mean out-of-sample R²")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
