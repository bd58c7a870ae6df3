"""Head-point annotations, detector boxes and manifest/sidecar I/O.

Manifest format (UTF-8 JSON, top-level list)::

    [{"image": "imgs/0001.png",
      "heads": [[x, y], ...],
      "detections": [[x1, y1, x2, y2, score], ...]}, ...]

The size sidecar maps each image relpath to ``[[x, y, eta, bin], ...]``
aligned by head index.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from PIL import Image

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for unreadable manifests, missing images or malformed entries."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class HeadPoint:
    x: float
    y: float
    eta: Optional[float] = None
    bin: Optional[int] = None


@dataclass(frozen=True)
class DetectionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def size(self) -> float:
        return max(self.width, self.height)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image_path: Path
    width: int
    height: int
    heads: tuple[HeadPoint, ...] = ()
    detections: tuple[DetectionBox, ...] = ()
    clamped: int = field(default=0, compare=False)

    @property
    def count(self) -> int:
        return len(self.heads)

    def with_heads(self, heads: Iterable[HeadPoint]) -> "ImageRecord":
        return replace(self, heads=tuple(heads))


def _clamp(v: float, hi: float) -> float:
    # Points must satisfy 0 <= v < hi; the last valid cell centre is hi - 1.
    if v < 0:
        return 0.0
    if v >= hi:
        return float(hi - 1)
    return v


def clamp_heads(heads: Sequence[HeadPoint], width: int, height: int) -> tuple[list[HeadPoint], int]:
    """Clamp head coordinates into the image; returns (heads, number clamped)."""
    out, n = [], 0
    for h in heads:
        x, y = _clamp(h.x, width), _clamp(h.y, height)
        if x != h.x or y != h.y:
            n += 1
            h = replace(h, x=x, y=y)
        out.append(h)
    return out, n


def clamp_boxes(boxes: Sequence[DetectionBox], width: int, height: int) -> tuple[list[DetectionBox], int]:
    """Clip boxes to the image rectangle; boxes that collapse are dropped."""
    out, n = [], 0
    for b in boxes:
        c = DetectionBox(
            min(max(b.x1, 0.0), width), min(max(b.y1, 0.0), height),
            min(max(b.x2, 0.0), width), min(max(b.y2, 0.0), height), b.score,
        )
        if c != b:
            n += 1
        if c.x2 > c.x1 and c.y2 > c.y1:
            out.append(c)
    return out, n


def _as_float(value, where: str, problems: list[str]) -> float:
    try:
        f = float(value)
    except (TypeError, ValueError):
        problems.append(f"{where}: expected a number, got {value!r}")
        return math.nan
    if not math.isfinite(f):
        problems.append(f"{where}: non-finite value {value!r}")
    return f


def _parse_entry(idx: int, entry, root: Path, problems: list[str]) -> Optional[ImageRecord]:
    n_before = len(problems)
    if not isinstance(entry, dict):
        problems.append(f"entry {idx}: expected an object, got {type(entry).__name__}")
        return None
    rel = entry.get("image")
    if not isinstance(rel, str) or not rel:
        problems.append(f"entry {idx}: field 'image' missing or not a string")
        return None
    raw_heads = entry.get("heads")
    if not isinstance(raw_heads, list):
        problems.append(f"entry {idx}: field 'heads' missing or not a list")
        return None
    heads = []
    for j, p in enumerate(raw_heads):
        if not isinstance(p, (list, tuple)) or len(p) < 2:
            problems.append(f"entry {idx}: field 'heads[{j}]' must be [x, y]")
            continue
        heads.append(HeadPoint(_as_float(p[0], f"entry {idx}: heads[{j}][0]", problems),
                               _as_float(p[1], f"entry {idx}: heads[{j}][1]", problems)))
    boxes = []
    raw_boxes = entry.get("detections", [])
    if not isinstance(raw_boxes, list):
        problems.append(f"entry {idx}: field 'detections' must be a list")
        raw_boxes = []
    for j, b in enumerate(raw_boxes):
        if not isinstance(b, (list, tuple)) or len(b) not in (4, 5):
            problems.append(f"entry {idx}: field 'detections[{j}]' must be [x1, y1, x2, y2, score]")
            continue
        vals = [_as_float(v, f"entry {idx}: detections[{j}][{k}]", problems) for k, v in enumerate(b)]
        if len(vals) == 4:
            vals.append(1.0)
        if not (vals[2] > vals[0] and vals[3] > vals[1]):
            problems.append(f"entry {idx}: field 'detections[{j}]' has x2 <= x1 or y2 <= y1")
            continue
        boxes.append(DetectionBox(*vals))

    path = (root / rel).resolve()
    if not path.is_file():
        problems.append(f"entry {idx}: image file not found: {path}")
        return None
    if len(problems) > n_before:
        return None
    try:
        with Image.open(path) as im:
            width, height = im.size
    except OSError as exc:
        problems.append(f"entry {idx}: cannot read image {path}: {exc}")
        return None

    heads, n_heads = clamp_heads(heads, width, height)
    boxes, n_boxes = clamp_boxes(boxes, width, height)
    if n_heads or n_boxes:
        log.warning("%s: clamped %d head(s) and %d box(es) into %dx%d",
                    rel, n_heads, n_boxes, width, height)
    return ImageRecord(rel, path, width, height, tuple(heads), tuple(boxes), n_heads)


def load_dataset(manifest_path: str | Path) -> list[ImageRecord]:
    """Load every manifest entry into an :class:`ImageRecord`, in manifest order.

    All problems are collected before raising so one run reports every bad
    entry. Out-of-bounds heads are clamped (never dropped) and counted in
    ``ImageRecord.clamped``.
    """
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError([f"manifest not found: {manifest_path}"]) from None
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError([f"cannot parse manifest {manifest_path}: {exc}"]) from None
    if not isinstance(entries, list):
        raise DatasetError([f"manifest {manifest_path}: top level must be a list"])

    problems: list[str] = []
    records = []
    for idx, entry in enumerate(entries):
        rec = _parse_entry(idx, entry, manifest_path.parent, problems)
        if rec is not None:
            records.append(rec)
    if problems:
        raise DatasetError(problems)
    return records


def write_manifest(records: Sequence[ImageRecord], out_path: str | Path) -> None:
    """Write records back out in manifest form (image ids are kept as relpaths)."""
    entries = []
    for r in records:
        entry = {"image": r.image_id, "heads": [[h.x, h.y] for h in r.heads]}
        if r.detections:
            entry["detections"] = [[b.x1, b.y1, b.x2, b.y2, b.score] for b in r.detections]
        entries.append(entry)
    Path(out_path).write_text(json.dumps(entries), encoding="utf-8")


def save_sizes(records: Sequence[ImageRecord], out_path: str | Path) -> None:
    """Write the size sidecar. Every head must carry ``eta`` and ``bin``."""
    payload = {}
    for r in records:
        rows = []
        for j, h in enumerate(r.heads):
            if h.eta is None or h.bin is None:
                missing = "eta" if h.eta is None else "bin"
                raise ValueError(f"{r.image_id}: head {j} has no {missing}")
            rows.append([h.x, h.y, h.eta, h.bin])
        payload[r.image_id] = rows
    Path(out_path).write_text(json.dumps(payload), encoding="utf-8")


def read_sizes(path: str | Path) -> dict[str, list[HeadPoint]]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: [HeadPoint(float(x), float(y), float(eta), int(b)) for x, y, eta, b in rows]
            for k, rows in raw.items()}


def apply_sizes(records: Sequence[ImageRecord], sizes_path: str | Path) -> list[ImageRecord]:
    """Attach sidecar sizes/bins to the matching records."""
    sizes = read_sizes(sizes_path)
    out = []
    for r in records:
        if r.image_id not in sizes:
            raise DatasetError([f"size sidecar has no entry for {r.image_id}"])
        heads = sizes[r.image_id]
        if len(heads) != len(r.heads):
            raise DatasetError([f"{r.image_id}: sidecar has {len(heads)} heads, manifest {len(r.heads)}"])
        out.append(r.with_heads(heads))
    return out
