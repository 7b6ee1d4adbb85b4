"""Matplotlib figure rendering for trend curves, ablation sweeps and sample grids.

Figures are written next to the delimited outputs they visualize."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_trend_curves(traces, path):
    """Three-panel plot: rescaled gradient norm, rescaled loss, target logit."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    panels = [("grad_rescaled", "rescaled gradient L1 norm"),
              ("loss_rescaled", "rescaled loss value"),
              ("target_logit", "target logit")]
    for ax, (attr, title) in zip(axes, panels):
        for trace in traces:
            ys = getattr(trace, attr)
            ax.plot(range(len(ys)), ys, label=trace.loss_id)
        ax.set_xlabel("iteration")
        ax.set_title(title)
        ax.legend()
    return _save(fig, path)


def save_ablation_curve(rows, axis_name, path):
    """Attack accuracy and FID against the swept axis value."""
    rows = [r for r in rows if r.get("attack_acc") is not None]
    xs = [r["value"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.6))
    ax1.plot(range(len(xs)), [r["attack_acc"] for r in rows], "o-", color="tab:blue",
             label="Attack Acc")
    ax1.set_xticks(range(len(xs)))
    ax1.set_xticklabels([str(x) for x in xs])
    ax1.set_xlabel(axis_name)
    ax1.set_ylabel("Attack Acc", color="tab:blue")
    fids = [r.get("fid") for r in rows]
    if any(f is not None for f in fids):
        ax2 = ax1.twinx()
        ax2.plot(range(len(xs)), [f if f is not None else np.nan for f in fids],
                 "s--", color="tab:red", label="FID")
        ax2.set_ylabel("FID", color="tab:red")
    return _save(fig, path)


def save_loss_history(history, path):
    """GAN training losses over iterations."""
    arr = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for col, label in [(1, "d_loss"), (2, "g_adv"), (3, "g_inv")]:
        ax.plot(arr[:, 0], arr[:, col], label=label, linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def save_image_grid(images, path, ncols=8, titles=None):
    """Dump a grid of (N, C, H, W) images in [0, 1]."""
    images = np.asarray(images.detach().cpu().numpy() if hasattr(images, "detach") else images)
    n = images.shape[0]
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.4 * ncols, 1.4 * nrows),
                             squeeze=False)
    for i in range(nrows * ncols):
        ax = axes[i // ncols][i % ncols]
        ax.axis("off")
        if i < n:
            img = images[i].transpose(1, 2, 0)
            ax.imshow(img.squeeze(-1) if img.shape[-1] == 1 else img,
                      cmap="gray" if img.shape[-1] == 1 else None, vmin=0, vmax=1)
            if titles:
                ax.set_title(str(titles[i]), fontsize=7)
    return _save(fig, path)
