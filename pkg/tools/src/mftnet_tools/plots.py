"""Figure rendering for the decoder's CSV exports: scalp topographies of
per-channel importance scores and confidence-vs-deletion curves.

Rendering is deterministic given fixed inputs and never modifies the CSVs.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy.interpolate import griddata

from .montage import positions_for

HEAD_RADIUS = 1.05


def read_scores_csv(path) -> tuple[list[str], np.ndarray]:
    """Parse a ``channel,score`` export."""
    labels, scores = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["channel", "score"]:
            raise ValueError(f"{path}: expected 'channel,score' header, got {header}")
        for row in reader:
            labels.append(row[0])
            scores.append(float(row[1]))
    return labels, np.asarray(scores)


def render_topomap(labels: list[str], values: np.ndarray,
                   resolution: int = 128) -> tuple[np.ndarray, tuple]:
    """Interpolate channel values onto a head-masked grid.

    Returns (grid, extent); grid cells outside the head circle are NaN.
    """
    pos = positions_for(labels)
    vals = np.asarray(values, dtype=float)
    lim = HEAD_RADIUS
    gx, gy = np.meshgrid(np.linspace(-lim, lim, resolution),
                         np.linspace(-lim, lim, resolution))
    near = griddata(pos, vals, (gx, gy), method="nearest")
    grid = near
    if len(pos) >= 4:   # cubic interpolation needs a triangulation
        try:
            cubic = griddata(pos, vals, (gx, gy), method="cubic")
            grid = np.where(np.isnan(cubic), near, cubic)
        except Exception:
            grid = near
    grid[np.hypot(gx, gy) > HEAD_RADIUS] = np.nan
    return grid, (-lim, lim, -lim, lim)


def plot_topomap(scores_csv, montage_labels: list[str] | None, out_image,
                 title: str | None = None) -> Path:
    """One topographic image from a ``channel,score`` CSV. Warm colors mark
    higher importance. Channel labels in the CSV must exist in the standard
    position table (raises listing any that do not)."""
    labels, scores = read_scores_csv(scores_csv)
    if montage_labels is not None:
        labels = montage_labels
        if len(labels) != len(scores):
            raise ValueError(f"montage lists {len(labels)} channels but the CSV "
                             f"has {len(scores)} scores")
    grid, extent = render_topomap(labels, scores)
    pos = positions_for(labels)

    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    im = ax.imshow(grid, origin="lower", extent=extent, cmap="RdBu_r")
    head = plt.Circle((0, 0), 1.0, fill=False, linewidth=1.5, color="black")
    ax.add_patch(head)
    ax.plot([-0.1, 0.0, 0.1], [0.99, 1.12, 0.99], color="black", linewidth=1.5)
    ax.scatter(pos[:, 0], pos[:, 1], s=8, color="black", zorder=3)
    ax.set_xlim(-1.25, 1.25)
    ax.set_ylim(-1.2, 1.3)
    ax.set_aspect("equal")
    ax.axis("off")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.7, label="importance")
    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_image, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_image


def read_deletion_csv(path) -> dict:
    """Parse a deletion export into {(class, mode): (fractions, means, stds)}."""
    rows = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["fraction", "mean_confidence", "std", "mode", "class"]
        if header != expected:
            raise ValueError(f"{path}: expected header {expected}, got {header}")
        for fraction, mean, std, mode, cls in reader:
            key = (cls, mode)
            rows[key].append((float(fraction), float(mean), float(std)))
    out = {}
    for key, triples in rows.items():
        fr, mean, std = (np.asarray(col) for col in zip(*triples))
        out[key] = (fr, mean, std)
    return out


def plot_deletion(curve_csv, out_image) -> Path:
    """Confidence vs deletion fraction, one panel per class: blue = most
    important electrodes deleted first, orange = least important, with
    standard-deviation shading."""
    curves = read_deletion_csv(curve_csv)
    classes = sorted({cls for cls, _ in curves})
    if not classes:
        raise ValueError(f"{curve_csv}: no curves found")
    colors = {"most-important": "tab:blue", "least-important": "tab:orange"}

    fig, axes = plt.subplots(1, len(classes), figsize=(4.6 * len(classes), 3.6),
                             squeeze=False)
    for ax, cls in zip(axes[0], classes):
        for mode, color in colors.items():
            if (cls, mode) not in curves:
                continue
            fr, mean, std = curves[(cls, mode)]
            ax.plot(fr, mean, color=color, label=f"{mode} deleted")
            ax.fill_between(fr, mean - std, mean + std, color=color, alpha=0.2)
        ax.set_xlabel("fraction of electrodes deleted")
        ax.set_ylabel("prediction confidence")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"class {cls}" if cls != "" else "all classes")
        ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_image, dpi=120)
    plt.close(fig)
    return out_image
