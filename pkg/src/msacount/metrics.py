"""Count metrics (MAE and the root-mean-square "MSE") and the evaluation driver."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .annotations import ImageRecord
from .densitymaps import DensityMap

Predictor = Callable[[np.ndarray, ImageRecord], np.ndarray]


@dataclass
class EvalResult:
    mae: float
    mse: float
    per_image: list[tuple[str, float, int]] = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "n_images": self.n_images,
                "per_image": [{"image": i, "pred": p, "gt": g} for i, p, g in self.per_image]}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "pred", "gt"])
            w.writerows(self.per_image)


def count(density: Union[DensityMap, np.ndarray]) -> float:
    values = density.values if isinstance(density, DensityMap) else np.asarray(density)
    return float(values.sum(dtype=np.float64))


def count_errors(preds: Sequence[float], gts: Sequence[float]) -> tuple[float, float]:
    """(MAE, MSE) where MSE is the square root of the mean squared count error."""
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"{p.shape[0]} predictions vs {g.shape[0]} ground-truth counts")
    if p.size == 0:
        raise ValueError("cannot compute metrics over zero images")
    err = np.abs(p - g)
    mae = float(err.mean())
    # scale by the largest error so tiny values do not underflow when squared
    top = float(err.max())
    mse = top * math.sqrt(float(((err / top) ** 2).mean())) if top > 0 else 0.0
    # QM >= AM; a few ulps of slack for mean rounding when all errors are equal
    if mse < mae * (1 - 1e-12):
        raise AssertionError(f"MSE {mse} < MAE {mae}")
    return mae, mse


def load_image(record: ImageRecord) -> np.ndarray:
    from PIL import Image

    with Image.open(record.image_path) as im:
        return np.asarray(im.convert("RGB"))


def evaluate(model, records: Sequence[ImageRecord], resolution_cap: bool = True,
             max_short_side: int = 1080, max_long_side: int = 1920) -> EvalResult:
    """Predict every record and score the counts against the number of annotated heads.

    ``model`` is either a :class:`~msacount.network.MultiBranchNet` or any
    callable ``(image, record) -> density`` (the image is passed after the
    optional resolution cap).
    """
    from .network import MultiBranchNet, predict_density
    from .pipeline import cap_resolution

    if not records:
        raise ValueError("evaluate needs at least one record")
    if isinstance(model, MultiBranchNet):
        predictor: Predictor = lambda img, rec: predict_density(model, img)
    else:
        predictor = model
    rows = []
    for rec in records:
        img = load_image(rec)
        if resolution_cap:
            img, _ = cap_resolution(img, max_short_side, max_long_side)
        rows.append((rec.image_id, count(predictor(img, rec)), rec.count))
    mae, mse = count_errors([r[1] for r in rows], [r[2] for r in rows])
    return EvalResult(mae, mse, rows)
