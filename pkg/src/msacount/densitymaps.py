"""Ground-truth density maps and per-scale supervision masks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import HeadPoint, ImageRecord


@dataclass
class DensityMap:
    values: np.ndarray  # (H, W) float32, persons per cell
    stride: int = 1

    @property
    def count(self) -> float:
        return float(self.values.sum(dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class ScaleMaskSet:
    masks: np.ndarray  # (C, H, W) uint8 in {0, 1}
    sigma: float

    @property
    def num_bins(self) -> int:
        return self.masks.shape[0]


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Isotropic Gaussian on integer offsets ``[-radius, radius]^2``, summing to 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def head_cell(h: HeadPoint, width: int, height: int) -> tuple[int, int]:
    """Nearest cell (col, row) for a head centre, kept inside the grid."""
    col = int(np.floor(h.x + 0.5))
    row = int(np.floor(h.y + 0.5))
    return min(max(col, 0), width - 1), min(max(row, 0), height - 1)


def render_points(heads: Sequence[HeadPoint], width: int, height: int, sigma: float = 15.0,
                  truncate: float = 3.0) -> np.ndarray:
    """Sum of unit-mass Gaussians, one per head; returns (H, W) float32.

    Kernels cut by the image border are renormalised over the part that is
    kept, so every head contributes exactly 1 regardless of position.
    """
    radius = max(1, int(np.ceil(truncate * sigma)))
    kernel = gaussian_kernel(sigma, radius)
    out = np.zeros((height, width), dtype=np.float64)
    for h in heads:
        cx, cy = head_cell(h, width, height)
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, width)
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, height)
        patch = kernel[y0 - cy + radius:y1 - cy + radius, x0 - cx + radius:x1 - cx + radius]
        out[y0:y1, x0:x1] += patch / patch.sum()
    return out.astype(np.float32)


def render_density(record: ImageRecord, sigma: float = 15.0) -> DensityMap:
    return DensityMap(render_points(record.heads, record.width, record.height, sigma), stride=1)


def window_bounds(center: int, sigma: float, limit: int) -> tuple[int, int]:
    """Half-open [lo, hi) span of a sigma-wide window centred on ``center``.

    Odd widths extend sigma//2 cells each side; even widths put the extra
    cell before the centre. Always exactly round(sigma) cells before clipping.
    """
    n = max(1, int(round(sigma)))
    lo = center - n // 2
    hi = center + (n - 1) // 2 + 1
    return max(lo, 0), min(hi, limit)


def render_scale_masks(record: ImageRecord, sigma: float = 15.0, C: int = 3) -> ScaleMaskSet:
    """Binary masks marking the sigma x sigma window around each head of bin c."""
    masks = np.zeros((C, record.height, record.width), dtype=np.uint8)
    for j, h in enumerate(record.heads):
        if h.bin is None:
            raise ValueError(f"{record.image_id}: head {j} has no bin index")
        if not 0 <= h.bin < C:
            raise ValueError(f"{record.image_id}: head {j} bin {h.bin} outside [0, {C})")
        cx, cy = head_cell(h, record.width, record.height)
        x0, x1 = window_bounds(cx, sigma, record.width)
        y0, y1 = window_bounds(cy, sigma, record.height)
        masks[h.bin, y0:y1, x0:x1] = 1
    return ScaleMaskSet(masks, sigma)


def save_array(arr: np.ndarray, path: str | Path) -> None:
    """Raw little-endian row-major binary plus a ``.json`` shape/dtype sidecar."""
    path = Path(path)
    dtype = np.dtype(arr.dtype).newbyteorder("<")
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C"))
    meta = {"shape": list(arr.shape), "dtype": dtype.name}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta), encoding="utf-8")


def load_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    return np.frombuffer(path.read_bytes(), dtype=dtype).reshape(meta["shape"]).copy()


def save_heatmap(values: np.ndarray, path: str | Path, cmap: str = "jet") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.imsave(str(path), values, cmap=cmap)
