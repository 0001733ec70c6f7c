"""PNG renderings of maps, detector images and line cuts (the --plot option)."""

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402

LOG_FLOOR = 1e-4


def render_map(values: np.ndarray, angular_pitch: float, path: Union[str, Path], saturate: Optional[float] = None,
               log: bool = False, title: str = "") -> Path:
    """Image in mrad with optional saturation (fraction of the maximum) or log scale"""
    rows, cols = values.shape
    extent = [(-(cols // 2) - 0.5) * angular_pitch * 1e3, (cols - 1 - cols // 2 + 0.5) * angular_pitch * 1e3,
              (-(rows // 2) - 0.5) * angular_pitch * 1e3, (rows - 1 - rows // 2 + 0.5) * angular_pitch * 1e3]
    peak = float(values.max()) if values.size else 0.0
    fig, ax = plt.subplots(figsize=(8, 8 * rows / max(cols, 1) + 1))
    if log and peak > 0:
        norm = LogNorm(vmin=peak * LOG_FLOOR, vmax=peak)
        image = ax.imshow(np.clip(values, peak * LOG_FLOOR, None), origin="lower", extent=extent, norm=norm,
                          cmap="inferno")
    else:
        vmax = peak * saturate if (saturate and peak > 0) else None
        image = ax.imshow(values, origin="lower", extent=extent, vmin=0, vmax=vmax, cmap="inferno")
    fig.colorbar(image, ax=ax, label="arb. units")
    ax.set_xlabel("θx (mrad)")
    ax.set_ylabel("θy (mrad)")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def render_mask(occupancy: np.ndarray, pixel_pitch: float, path: Union[str, Path], title: str = "") -> Path:
    rows, cols = occupancy.shape
    half_w, half_h = cols * pixel_pitch * 1e9 / 2, rows * pixel_pitch * 1e9 / 2
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(occupancy.astype(float), origin="lower", extent=[-half_w, half_w, -half_h, half_h], cmap="gray",
              vmin=0, vmax=1)
    ax.set_xlabel("x (nm)")
    ax.set_ylabel("y (nm)")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def render_line_cut(positions: np.ndarray, data: np.ndarray, path: Union[str, Path],
                    curves: Sequence[tuple] = (), title: str = "") -> Path:
    """Data points plus labelled model curves, normalized to the data maximum"""
    peak = float(np.max(data)) if len(data) and np.max(data) > 0 else 1.0
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(positions * 1e3, data / peak, "o", ms=3, color="black", label="data")
    for label, values in curves:
        ax.plot(positions * 1e3, np.asarray(values) / peak, "-", label=label)
    ax.set_xlabel("θx (mrad)")
    ax.set_ylabel("intensity (normalized)")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return Path(path)
