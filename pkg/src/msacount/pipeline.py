"""Crop sampling, inference-time resolution capping and synthetic crowd scenes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .annotations import DetectionBox, HeadPoint, ImageRecord, write_manifest
from .densitymaps import DensityMap, ScaleMaskSet, head_cell


# ---------------------------------------------------------------------------
# resolution cap
# ---------------------------------------------------------------------------

def capped_scale(height: int, width: int, max_short_side: int = 1080, max_long_side: int = 1920) -> float:
    short, long_ = min(height, width), max(height, width)
    return min(1.0, max_short_side / short, max_long_side / long_)


def cap_resolution(image: np.ndarray, max_short_side: int = 1080,
                   max_long_side: int = 1920) -> tuple[np.ndarray, float]:
    """Uniformly downscale ``image`` so both side limits hold; returns (image, scale).

    Images already within the limits are returned untouched with scale 1.
    """
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot cap an empty image")
    s = capped_scale(h, w, max_short_side, max_long_side)
    if s >= 1.0:
        return image, 1.0
    size = (max(1, round(w * s)), max(1, round(h * s)))
    resized = np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR))
    return resized, s


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropSpec:
    size: int = 384
    samples_per_image: int = 4
    rng_seed: int = 0
    hflip: bool = False


@dataclass
class Crop:
    image: np.ndarray   # (s, s, 3)
    gt: np.ndarray      # (s, s) float32
    masks: np.ndarray   # (C, s, s) uint8
    count: int          # heads whose centre cell lies in the window
    window: tuple[int, int]


def crop_rng(seed: int, worker: int = 0, epoch: int = 0) -> np.random.Generator:
    """Independent reproducible stream per (seed, worker, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, worker, epoch]))


def _pad_to(image: np.ndarray, gt: np.ndarray, masks: np.ndarray, size: int):
    h, w = gt.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if not (ph or pw):
        return image, gt, masks
    # reflect needs pad < dim; fall back to edge replication for tiny images
    mode = "reflect" if ph < h and pw < w else "edge"
    image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)
    gt = np.pad(gt, ((0, ph), (0, pw)))          # zeros: padding adds no people
    masks = np.pad(masks, ((0, 0), (0, ph), (0, pw)))
    return image, gt, masks


def sample_crop(record: ImageRecord, image: np.ndarray, gt: DensityMap, masks: ScaleMaskSet,
                spec: CropSpec, rng: Optional[np.random.Generator] = None) -> Crop:
    """Cut the same random ``spec.size`` window from image, GT and every mask.

    GT is cropped rather than re-rendered, so a head straddling the window
    edge contributes only the part of its kernel that falls inside.
    """
    rng = crop_rng(spec.rng_seed) if rng is None else rng
    img, g, m = _pad_to(image, gt.values, masks.masks, spec.size)
    h, w = g.shape
    y0 = int(rng.integers(0, h - spec.size + 1))
    x0 = int(rng.integers(0, w - spec.size + 1))
    sl = (slice(y0, y0 + spec.size), slice(x0, x0 + spec.size))
    img_c, g_c, m_c = img[sl], g[sl], m[(slice(None),) + sl]
    n = 0
    for hd in record.heads:
        cx, cy = head_cell(hd, record.width, record.height)
        n += (x0 <= cx < x0 + spec.size) and (y0 <= cy < y0 + spec.size)
    if spec.hflip and rng.random() < 0.5:
        img_c, g_c, m_c = img_c[:, ::-1], g_c[:, ::-1], m_c[:, :, ::-1]
    return Crop(np.ascontiguousarray(img_c), np.ascontiguousarray(g_c),
                np.ascontiguousarray(m_c), n, (y0, x0))


def split_train_val(records: Sequence, train_fraction: float = 0.8, seed: int = 0):
    """Shuffled 80/20 style split; returns (train, val) keeping relative order."""
    idx = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(train_fraction * len(records)))
    train_idx, val_idx = sorted(idx[:n_train]), sorted(idx[n_train:])
    return [records[i] for i in train_idx], [records[i] for i in val_idx]


def pixel_stats(images: Sequence[np.ndarray]) -> tuple[list[float], list[float]]:
    """Per-channel mean and std of images scaled to [0, 1]."""
    s = np.zeros(3)
    s2 = np.zeros(3)
    n = 0
    for im in images:
        x = np.asarray(im, dtype=np.float64).reshape(-1, 3) / 255.0
        s += x.sum(0)
        s2 += (x * x).sum(0)
        n += len(x)
    mean = s / n
    std = np.sqrt(np.maximum(s2 / n - mean * mean, 1e-12))
    return mean.tolist(), std.tolist()


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas: tuple[int, int] = (256, 256)   # (H, W)
    n_heads: int = 20
    size_range: tuple[float, float] = (6.0, 60.0)
    layout: str = "uniform"                # "uniform" | "two-cluster"
    rng_seed: int = 0
    jitter: bool = True
    large_fraction: float = 0.25           # two-cluster only
    noise_std: float = 12.0
    gap: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        for key in ("canvas", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SyntheticScene:
    record: ImageRecord
    image: np.ndarray
    diameters: np.ndarray


def _place_once(rng, diam, region, xy, ds, gap, attempts):
    x_lo, y_lo, x_hi, y_hi = region
    out = []
    for d in diam:
        for _ in range(attempts):
            x = rng.uniform(x_lo + d / 2, x_hi - d / 2)
            y = rng.uniform(y_lo + d / 2, y_hi - d / 2)
            if xy:
                a = np.asarray(xy)
                need = (np.asarray(ds) + d) / 2 + gap
                if np.any((a[:, 0] - x) ** 2 + (a[:, 1] - y) ** 2 < need ** 2):
                    continue
            xy.append((x, y))
            ds.append(d)
            out.append((x, y))
            break
        else:
            return None
    return out


def _place(rng, diam, region, placed_xy, placed_d, gap, attempts=300, restarts=25):
    """Rejection-sample non-overlapping disk centres inside ``region``.

    A greedy pass can paint itself into a corner, so the whole group is
    redrawn up to ``restarts`` times before giving up.
    """
    for _ in range(restarts):
        out = _place_once(rng, diam, region, list(placed_xy), list(placed_d), gap, attempts)
        if out is not None:
            return out
    raise ValueError(f"cannot pack {len(diam)} heads of diameter up to {max(diam):.1f} into region "
                     f"{tuple(round(float(v), 1) for v in region)}; lower n_heads or enlarge the canvas")


def synth_generate(spec: SyntheticSceneSpec, image_id: str = "synthetic.png") -> SyntheticScene:
    """Random scene of filled disks on noise, with exact positions, diameters and boxes."""
    rng = np.random.default_rng(spec.rng_seed)
    H, W = spec.canvas
    lo, hi = spec.size_range
    n = spec.n_heads
    if hi < lo or lo <= 0:
        raise ValueError(f"bad size_range {spec.size_range}")
    if hi > min(H, W):
        raise ValueError(f"heads of diameter {hi} do not fit a {H}x{W} canvas")

    if spec.layout == "uniform":
        diam = rng.uniform(lo, hi, size=n)
        if np.sum(np.pi * (diam / 2 + spec.gap) ** 2) > 0.5 * H * W:
            raise ValueError(f"{n} heads cannot be packed into a {H}x{W} canvas")
        pts = _place(rng, diam, (0, 0, W, H), [], [], spec.gap) if n else []
    elif spec.layout == "two-cluster":
        n_large = int(round(spec.large_fraction * n))
        n_small = n - n_large
        diam = np.concatenate([np.full(n_small, float(lo)), np.full(n_large, float(hi))])
        split = W // 2
        # small heads: a compact square cluster inside the left half
        side = min(split, H, max(lo * 2, math.sqrt(max(n_small, 1)) * 2.5 * (lo + spec.gap)))
        cx0 = rng.uniform(0, split - side)
        cy0 = rng.uniform(0, H - side)
        small = _place(rng, diam[:n_small], (cx0, cy0, cx0 + side, cy0 + side), [], [], spec.gap)
        large = _place(rng, diam[n_small:], (split, 0, W, H), small, list(diam[:n_small]), spec.gap)
        pts = small + large
    else:
        raise ValueError(f"unknown layout {spec.layout!r}")

    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    img = 128.0 + rng.normal(0.0, spec.noise_std, size=(H, W, 3))
    yy, xx = np.mgrid[0:H, 0:W]
    boxes = []
    for (x, y), d in zip(pts, diam):
        r = d / 2
        y0, y1 = max(int(y - r) - 1, 0), min(int(y + r) + 2, H)
        x0, x1 = max(int(x - r) - 1, 0), min(int(x + r) + 2, W)
        inside = (xx[y0:y1, x0:x1] - x) ** 2 + (yy[y0:y1, x0:x1] - y) ** 2 <= r * r
        tone = rng.uniform(20, 70, size=3)
        img[y0:y1, x0:x1][inside] = tone
        fw, fh = (rng.uniform(0.9, 1.1, size=2) if spec.jitter else (1.0, 1.0))
        bw, bh = d * fw, d * fh
        boxes.append(DetectionBox(max(x - bw / 2, 0.0), max(y - bh / 2, 0.0),
                                  min(x + bw / 2, float(W)), min(y + bh / 2, float(H)), 1.0))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    heads = tuple(HeadPoint(float(x), float(y)) for x, y in pts)
    rec = ImageRecord(image_id, Path(image_id), W, H, heads, tuple(boxes))
    return SyntheticScene(rec, img, np.asarray(diam, dtype=np.float64))


def write_synthetic_dataset(out_dir: str | Path, spec: SyntheticSceneSpec, n_images: int,
                            n_heads_range: Optional[tuple[int, int]] = None) -> list[ImageRecord]:
    """Generate ``n_images`` scenes into ``out_dir`` with a manifest and a truth file.

    Image i uses seed ``spec.rng_seed + i``. When ``n_heads_range`` is given,
    each image draws its head count uniformly from it.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    count_rng = np.random.default_rng(spec.rng_seed)
    records, truth = [], {}
    for i in range(n_images):
        n = spec.n_heads
        if n_heads_range is not None:
            n = int(count_rng.integers(n_heads_range[0], n_heads_range[1] + 1))
        s = SyntheticSceneSpec(**{**asdict(spec), "n_heads": n, "rng_seed": spec.rng_seed + i})
        rel = f"images/{i:04d}.png"
        scene = synth_generate(s, rel)
        Image.fromarray(scene.image).save(out_dir / rel)
        records.append(scene.record)
        truth[rel] = scene.diameters.tolist()
    write_manifest(records, out_dir / "manifest.json")
    (out_dir / "truth.json").write_text(json.dumps(truth), encoding="utf-8")
    from .annotations import load_dataset
    return load_dataset(out_dir / "manifest.json")
