"""Matplotlib figures for sweeps and reconstructions (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version or timestamp in the file, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_sweep(rows, path, title: str | None = None) -> Path:
    """Mean WMAPE (aggregate rows) against the swept value, with std bars."""
    agg = [r for r in rows if r.repeat == -1]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [str(r.value) for r in agg]
    numeric = all(isinstance(r.value, (int, float)) and not isinstance(r.value, bool) for r in agg)
    xs = [float(r.value) for r in agg] if numeric else list(range(len(agg)))
    ax.errorbar(xs, [r.mean_wmape_pct for r in agg], yerr=[r.std_wmape_pct for r in agg],
                marker="o", capsize=3)
    if not numeric:
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, rotation=20)
    if agg:
        ax.set_xlabel(agg[0].axis)
        ax.set_title(title or f"{agg[0].forward_model}: WMAPE over {agg[0].axis}")
    ax.set_ylabel("WMAPE (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_reconstruction(truth, result, path, layout=None, channel: int = 0) -> Path:
    """Ground truth, posterior mean, posterior std and absolute error of one channel."""
    truth = np.asarray(truth)[channel]
    mean = np.asarray(result.mean)[channel]
    std = np.asarray(result.std)[channel]
    panels = [("truth", truth), ("mean", mean), ("std", std), ("|error|", np.abs(mean - truth))]
    fig, axes = plt.subplots(1, 4, figsize=(10, 3.6))
    lo, hi = float(min(truth.min(), mean.min())), float(max(truth.max(), mean.max()))
    for ax, (name, img) in zip(axes, panels):
        shared = name in ("truth", "mean")
        im = ax.imshow(img, cmap="viridis", vmin=lo if shared else None, vmax=hi if shared else None)
        if layout is not None and layout.n:
            ax.scatter(layout.cols, layout.rows, s=10, c="red", marker="x")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.07)
    if result.wmape is not None:
        fig.suptitle(f"WMAPE {result.wmape:.2f}%")
    fig.tight_layout()
    return _save(fig, path)


def plot_fields(fields, path, titles=None) -> Path:
    """A row of single-channel fields sharing one color scale."""
    fields = [np.asarray(f) for f in fields]
    fig, axes = plt.subplots(1, len(fields), figsize=(2.4 * len(fields), 3.4), squeeze=False)
    lo = min(float(f.min()) for f in fields)
    hi = max(float(f.max()) for f in fields)
    for k, (ax, f) in enumerate(zip(axes[0], fields)):
        ax.imshow(f, cmap="viridis", vmin=lo, vmax=hi)
        ax.set_xticks([])
        ax.set_yticks([])
        if titles:
            ax.set_title(titles[k])
    fig.tight_layout()
    return _save(fig, path)
