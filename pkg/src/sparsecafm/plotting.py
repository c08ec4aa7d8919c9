"""Matplotlib rendering of scan panels and metric summaries."""

from __future__ import annotations

import csv
from collections import defaultdict
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scanio import ScanField  # noqa: E402


def panels(fields: Sequence[ScanField], out_path, titles: Sequence[str] | None = None, cmap: str = "viridis") -> None:
    """Side-by-side rasters (e.g. sparse | reconstruction | original) with one shared colour scale."""
    n = len(fields)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4), squeeze=False)
    vmin = min(float(f.data.min()) for f in fields)
    vmax = max(float(f.data.max()) for f in fields)
    for ax, f, title in zip(axes[0], fields, titles or [""] * n):
        w, h = f.physical_extent
        im = ax.imshow(f.data, cmap=cmap, vmin=vmin, vmax=vmax, extent=(0, w, h, 0), interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("µm")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label=fields[0].units)
    fig.savefig(out_path, dpi=120, metadata={"Colormap": cmap, "Software": "sparsecafm"})
    plt.close(fig)


def metrics_bars(csv_path, out_path) -> None:
    """Mean PSNR and SSIM per (method, sigma) from an evaluation CSV."""
    groups: dict[tuple[str, str], list[tuple[float, float]]] = defaultdict(list)
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups[(row["method"], row["sigma"])].append((float(row["psnr_db"]), float(row["ssim"])))
    keys = sorted(groups)
    labels = [f"{m} x{s}" for m, s in keys]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.4))
    for ax, idx, name in ((a1, 0, "PSNR (dB)"), (a2, 1, "SSIM")):
        vals = [np.mean([v[idx] for v in groups[k] if np.isfinite(v[idx])] or [np.nan]) for k in keys]
        ax.bar(labels, vals, color=plt.get_cmap("viridis")(np.linspace(0.2, 0.8, len(keys))))
        ax.set_ylabel(name)
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Colormap": "viridis", "Software": "sparsecafm"})
    plt.close(fig)
