"""Automatic per-head size estimation and equal-count size binning.

A head's size is the smaller of two estimates: the mean distance to its k
nearest annotated neighbours (works in dense crowds) and the median
``max(w, h)`` of the k detector boxes whose centres are closest (works in
sparse scenes). Heads are then split into C buckets of roughly equal
population.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .annotations import DetectionBox, HeadPoint, ImageRecord


@dataclass(frozen=True)
class SizeEstimatorConfig:
    k: int = 3
    default_eta: float = 15.0
    ga_half_factor: bool = False
    num_bins: int = 3
    min_eta: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.default_eta > 0:
            raise ValueError(f"default_eta must be > 0, got {self.default_eta}")
        if self.num_bins < 1:
            raise ValueError(f"num_bins must be >= 1, got {self.num_bins}")


def _xy(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(np.float64)
    return np.array([(p.x, p.y) for p in points], dtype=np.float64).reshape(-1, 2)


def _knn(tree_pts: np.ndarray, query: np.ndarray, k: int, exclude_self: bool):
    """Indices of the k nearest tree points to each query row.

    Returns an (n, k') int array with k' = min(k, available); distances are
    recomputed by the caller so that results do not depend on tree internals.
    """
    n = len(tree_pts)
    avail = n - 1 if exclude_self else n
    kk = min(k, avail)
    if kk <= 0:
        return np.empty((len(query), 0), dtype=np.intp)
    tree = cKDTree(tree_pts)
    q = kk + 1 if exclude_self else kk
    _, idx = tree.query(query, k=q)
    idx = np.asarray(idx).reshape(len(query), q)
    if not exclude_self:
        return idx
    # Move the self match to the end of each row and keep the first kk. With
    # coincident points self may be absent; the extra match is then tied at
    # distance zero with the rest, so dropping the last one is exact.
    is_self = idx == np.arange(len(query))[:, None]
    order = np.argsort(is_self, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)[:, :kk]


def _pair_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    return np.sqrt(dx * dx + dy * dy)


def eta_ga_all(points, k: int = 3, default_eta: float = 15.0, half: bool = False) -> np.ndarray:
    """Geometry-adaptive size for every point of one image (vectorised)."""
    xy = _xy(points)
    n = len(xy)
    if n == 0:
        return np.empty(0)
    if n == 1:
        return np.full(1, float(default_eta))
    idx = _knn(xy, xy, k, exclude_self=True)
    d = np.sort(_pair_dist(xy[:, None, :], xy[idx]), axis=1)
    eta = d.sum(axis=1) / d.shape[1]
    if half:
        eta = 0.5 * eta
    return eta


def eta_ga(point: HeadPoint, all_points: Sequence[HeadPoint], k: int = 3,
           default_eta: float = 15.0, half: bool = False) -> float:
    """Mean distance from ``point`` to its k nearest *other* heads.

    ``all_points`` must contain ``point``. Fewer than k neighbours are averaged
    as available; an isolated head gets ``default_eta``.
    """
    xy = _xy(all_points)
    i = _index_of(point, xy)
    return float(eta_ga_all(xy, k, default_eta, half)[i])


def _index_of(point: HeadPoint, xy: np.ndarray) -> int:
    hit = np.flatnonzero((xy[:, 0] == point.x) & (xy[:, 1] == point.y))
    if not len(hit):
        raise ValueError(f"point ({point.x}, {point.y}) is not in all_points")
    return int(hit[0])


def _box_arrays(boxes: Sequence[DetectionBox]) -> tuple[np.ndarray, np.ndarray]:
    if not len(boxes):
        return np.empty((0, 2)), np.empty(0)
    b = np.array([(z.x1, z.y1, z.x2, z.y2) for z in boxes], dtype=np.float64)
    centers = np.stack([0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])], axis=1)
    sizes = np.maximum(b[:, 2] - b[:, 0], b[:, 3] - b[:, 1])
    return centers, sizes


def eta_bb_all(points, boxes: Sequence[DetectionBox], k: int = 3) -> np.ndarray:
    """Box-adaptive size for every point; ``inf`` when the image has no boxes."""
    xy = _xy(points)
    if len(xy) == 0:
        return np.empty(0)
    centers, sizes = _box_arrays(boxes)
    if len(sizes) == 0:
        return np.full(len(xy), math.inf)
    idx = _knn(centers, xy, k, exclude_self=False)
    # np.median takes the midpoint of the two central values for even counts.
    return np.median(sizes[idx], axis=1)


def eta_bb(point: HeadPoint, boxes: Sequence[DetectionBox], k: int = 3) -> float:
    """Median ``max(w, h)`` over the k boxes whose centres are nearest ``point``."""
    return float(eta_bb_all([point], boxes, k)[0])


def eta_fuse_all(points, boxes: Sequence[DetectionBox], cfg: SizeEstimatorConfig,
                 max_eta: float = math.inf) -> np.ndarray:
    ga = eta_ga_all(points, cfg.k, cfg.default_eta, cfg.ga_half_factor)
    bb = eta_bb_all(points, boxes, cfg.k)
    return np.clip(np.minimum(ga, bb), cfg.min_eta, max_eta)


def eta_fuse(point: HeadPoint, all_points: Sequence[HeadPoint], boxes: Sequence[DetectionBox],
             cfg: SizeEstimatorConfig = SizeEstimatorConfig(), max_eta: float = math.inf) -> float:
    """``min(eta_ga, eta_bb)`` clamped to ``[cfg.min_eta, max_eta]``."""
    ga = eta_ga(point, all_points, cfg.k, cfg.default_eta, cfg.ga_half_factor)
    bb = eta_bb(point, boxes, cfg.k)
    return float(min(max(min(ga, bb), cfg.min_eta), max_eta))


def estimate_record(record: ImageRecord, cfg: SizeEstimatorConfig) -> ImageRecord:
    """Populate ``eta`` on every head of one image (bins untouched)."""
    if not record.heads:
        return record
    max_eta = 0.5 * max(record.width, record.height)
    etas = eta_fuse_all(record.heads, record.detections, cfg, max_eta)
    return record.with_heads(replace(h, eta=float(e)) for h, e in zip(record.heads, etas))


@dataclass(frozen=True)
class BinEdges:
    edges: tuple[float, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing: {self.edges}")

    @property
    def num_bins(self) -> int:
        return len(self.edges) + 1

    def assign(self, etas) -> np.ndarray:
        # side="left": eta equal to an edge falls in the lower (right-closed) bin
        return np.searchsorted(np.asarray(self.edges, dtype=np.float64),
                               np.asarray(etas, dtype=np.float64), side="left")


def fit_bins(all_etas, C: int = 3) -> BinEdges:
    """Equal-count bucket edges for right-closed intervals ``(e[c-1], e[c]]``.

    Edge c is the smallest observed size with at least ``c/C`` of the data at
    or below it. Ties can make consecutive edges collide; those are moved to
    the next distinct value so every bucket stays non-empty.
    """
    if C < 1:
        raise ValueError(f"C must be >= 1, got {C}")
    v = np.sort(np.asarray(all_etas, dtype=np.float64).ravel())
    if C == 1:
        return BinEdges(())
    uniq = np.unique(v)
    if len(uniq) < C:
        raise ValueError(f"only {len(uniq)} distinct head sizes for C={C} bins; use a smaller C")
    n = len(v)
    edges_u = []
    prev = -1
    for c in range(1, C):
        rank = (n * c + C - 1) // C - 1  # ceil(n*c/C) - 1 in exact integer arithmetic
        u = int(np.searchsorted(uniq, v[rank]))
        u = max(u, prev + 1)
        u = min(u, len(uniq) - 1 - (C - 1 - c) - 1)
        edges_u.append(u)
        prev = u
    return BinEdges(tuple(float(uniq[u]) for u in edges_u))


def assign_bins(records: Sequence[ImageRecord], edges: BinEdges) -> list[ImageRecord]:
    out = []
    for r in records:
        if any(h.eta is None for h in r.heads):
            raise ValueError(f"{r.image_id}: heads must carry eta before binning")
        bins = edges.assign([h.eta for h in r.heads])
        out.append(r.with_heads(replace(h, bin=int(b)) for h, b in zip(r.heads, bins)))
    return out


def estimate_sizes(records: Sequence[ImageRecord], cfg: SizeEstimatorConfig = SizeEstimatorConfig(),
                   edges: Optional[BinEdges] = None) -> tuple[list[ImageRecord], BinEdges]:
    """Estimate sizes for every record and bin them.

    Bins are fitted on these records unless ``edges`` (e.g. from the training
    split) is passed in.
    """
    sized = [estimate_record(r, cfg) for r in records]
    if edges is None:
        edges = fit_bins([h.eta for r in sized for h in r.heads], cfg.num_bins)
    return assign_bins(sized, edges), edges
