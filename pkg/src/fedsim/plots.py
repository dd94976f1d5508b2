"""Figure rendering.

Every figure writes a CSV twin carrying exactly the plotted data, so no
number exists only inside an image file.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

CurveSeries = Sequence[Tuple[str, Sequence[Tuple[int, float]]]]


def save_learning_curve(series: CurveSeries, png_path: str,
                        csv_path: str) -> None:
    """Validation accuracy against round for one or more runs."""
    rows = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, points in series:
        ts = [t for t, _ in points]
        accs = [a for _, a in points]
        ax.plot(ts, accs, label=label, linewidth=1.5)
        rows.extend({"run": label, "t": t, "acc": a} for t, a in points)
    ax.set_xlabel("communication round")
    ax.set_ylabel("validation accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    pd.DataFrame(rows, columns=["run", "t", "acc"]).to_csv(csv_path,
                                                           index=False)


def save_partition_heatmap(counts: np.ndarray, png_path: str,
                           csv_path: str) -> None:
    """Client-by-class label count matrix as a heatmap."""
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(4, 0.5 + 0.4 * counts.shape[0]))
    image = ax.imshow(counts, aspect="auto", cmap="viridis")
    ax.set_xlabel("class")
    ax.set_ylabel("client")
    ax.set_xticks(range(counts.shape[1]))
    fig.colorbar(image, ax=ax, label="training nodes")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    frame = pd.DataFrame(
        counts, columns=[f"label_{c}" for c in range(counts.shape[1])])
    frame.insert(0, "client", range(counts.shape[0]))
    frame.to_csv(csv_path, index=False)


def save_feature_map(client_points: Dict[int, np.ndarray],
                     labels: np.ndarray,
                     classify: Callable[[torch.Tensor], torch.Tensor],
                     png_path: str, csv_path: str,
                     grid_steps: int = 120) -> None:
    """Per-client 2-D representation scatter over the global decision map.

    `client_points` maps client id to an (n, 2) array of representations
    of one shared probe set; `labels` are the probe labels; `classify`
    maps (m, 2) inputs to logits.
    """
    for cid, pts in client_points.items():
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(
                f"client {cid} representations have dimension "
                f"{pts.shape[-1]}, need exactly 2")

    stacked = np.concatenate(list(client_points.values()))
    lo = stacked.min(axis=0) - 1.0
    hi = stacked.max(axis=0) + 1.0
    xs = np.linspace(lo[0], hi[0], grid_steps)
    ys = np.linspace(lo[1], hi[1], grid_steps)
    gx, gy = np.meshgrid(xs, ys)
    grid = torch.as_tensor(np.stack([gx.ravel(), gy.ravel()], axis=1),
                           dtype=torch.get_default_dtype())
    with torch.no_grad():
        region = classify(grid).argmax(dim=1).numpy().reshape(gx.shape)

    ids = sorted(client_points)
    ncols = min(5, len(ids))
    nrows = math.ceil(len(ids) / ncols)
    fig, axes = plt.subplots(nrows, ncols,
                             figsize=(3 * ncols, 2.6 * nrows),
                             squeeze=False)
    rows = []
    for slot, cid in enumerate(ids):
        ax = axes[slot // ncols][slot % ncols]
        ax.contourf(gx, gy, region, alpha=0.2, levels=[-0.5, 0.5, 1.5],
                    cmap="coolwarm")
        pts = client_points[cid]
        for cls, marker in ((0, "o"), (1, "^")):
            sel = labels == cls
            ax.scatter(pts[sel, 0], pts[sel, 1], s=12, marker=marker,
                       label=f"class {cls}")
        ax.set_title(f"client {cid}", fontsize=9)
        rows.extend({"client": cid, "x": float(p[0]), "y": float(p[1]),
                     "label": int(l)} for p, l in zip(pts, labels))
    for slot in range(len(ids), nrows * ncols):
        axes[slot // ncols][slot % ncols].axis("off")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    pd.DataFrame(rows, columns=["client", "x", "y", "label"]).to_csv(
        csv_path, index=False)
