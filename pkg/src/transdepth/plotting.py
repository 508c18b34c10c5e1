"""Report figures (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_sample(sample, out, path) -> Path:
    """Inputs, the three depth estimates, confidence and masked error for one sample."""
    gt = sample.gt_depth
    mask = sample.mask > 0
    valid = gt[gt > 0]
    lo, hi = (float(valid.min()), float(valid.max())) if valid.size else (0.0, 1.0)
    restored = out.depth_restored.data
    err = np.where(mask, np.abs(restored - gt), np.nan)
    panels = [
        ("reference RGB", sample.rgb_ref.transpose(1, 2, 0), {}),
        ("raw depth", np.where(sample.raw_depth > 0, sample.raw_depth, np.nan),
         dict(vmin=lo, vmax=hi)),
        ("ground truth", gt, dict(vmin=lo, vmax=hi)),
        ("transparent mask", sample.mask, dict(cmap="gray", vmin=0, vmax=1)),
        ("single-view depth", out.depth_single.data, dict(vmin=lo, vmax=hi)),
        ("multi-view depth", out.depth_multi.data, dict(vmin=lo, vmax=hi)),
        ("restored depth", restored, dict(vmin=lo, vmax=hi)),
        ("multi-view confidence", out.conf_multi.data, dict(cmap="magma", vmin=0, vmax=1)),
    ]
    fig, axes = plt.subplots(2, 5, figsize=(15, 6.2))
    for ax, (title, img, kw) in zip(axes.flat, panels):
        im = ax.imshow(img, **kw)
        ax.set_title(title, fontsize=9)
        if kw:
            fig.colorbar(im, ax=ax, fraction=0.046)
    ax = axes.flat[8]
    im = ax.imshow(err, cmap="inferno")
    ax.set_title("|restored - gt| in mask (m)", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax = axes.flat[9]
    ax.hist([np.abs(d - gt)[mask] for d in (out.depth_single.data, out.depth_multi.data, restored)],
            bins=20, label=["single", "multi", "restored"])
    ax.set_title("masked absolute error (m)", fontsize=9)
    ax.legend(fontsize=7)
    for ax in axes.flat[:9]:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(sample.id)
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curve(log: list[dict], path) -> Path:
    """Loss components per iteration on a log scale."""
    it = np.array([r["iteration"] for r in log])
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (("loss", "total"), ("l_restored", "restored"), ("l_multi", "multi-view"),
                       ("l_single", "single-view"), ("l_normal", "normals")):
        ax.plot(it, [r[key] for r in log], label=label, lw=1.2 if key == "loss" else 0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
