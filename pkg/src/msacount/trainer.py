"""Training loop: crop batches, Adam with a step learning-rate drop, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .annotations import ImageRecord
from .densitymaps import DensityMap, ScaleMaskSet, render_density, render_scale_masks
from .headsize import BinEdges, SizeEstimatorConfig, estimate_sizes
from .losses import LossConfig, total_loss
from .metrics import EvalResult, evaluate, load_image
from .network import MultiBranchNet, build_model, save_checkpoint
from .pipeline import CropSpec, crop_rng, pixel_stats, sample_crop

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr_initial: float = 1e-4
    lr_after_drop: float = 1e-5
    drop_epoch: int = 80
    lam: float = 0.1
    sigma: float = 15.0
    C: int = 3
    k: int = 3
    init_std: float = 0.0033
    seed: int = 0
    preset: str = "vgg16"
    aggregation: str = "attention"
    crop_size: int = 384
    samples_per_image: int = 4
    scale_loss: bool = True
    hflip: bool = False
    deterministic: bool = True
    resolution_cap: bool = True
    max_steps: Optional[int] = None
    ga_half_factor: bool = False
    loss_scale: float = 1e4

    def __post_init__(self):
        if not 0 < self.lr_after_drop <= self.lr_initial:
            raise ValueError("need 0 < lr_after_drop <= lr_initial")
        if self.epochs > 0 and not 0 < self.drop_epoch <= self.epochs:
            raise ValueError("need 0 < drop_epoch <= epochs")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=30, batch_size=8, drop_epoch=20, preset="tiny", crop_size=128,
                    lr_initial=1e-3, lr_after_drop=1e-4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "TrainConfig":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        return self.lr_initial if epoch < self.drop_epoch else self.lr_after_drop

    def size_config(self) -> SizeEstimatorConfig:
        return SizeEstimatorConfig(k=self.k, num_bins=self.C, ga_half_factor=self.ga_half_factor)


@dataclass
class Sample:
    record: ImageRecord
    image: np.ndarray
    gt: DensityMap
    masks: ScaleMaskSet


@dataclass
class History:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.steps + self.epochs:
                fh.write(json.dumps(row) + "\n")


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def ensure_sizes(records: Sequence[ImageRecord], cfg: TrainConfig,
                 edges: Optional[BinEdges] = None) -> tuple[list[ImageRecord], Optional[BinEdges]]:
    """Estimate sizes and bins for records whose heads lack them."""
    if all(h.bin is not None for r in records for h in r.heads):
        return list(records), edges
    return estimate_sizes(records, cfg.size_config(), edges)


def prepare_samples(records: Sequence[ImageRecord], cfg: TrainConfig) -> list[Sample]:
    out = []
    for r in records:
        img = load_image(r)
        out.append(Sample(r, img, render_density(r, cfg.sigma), render_scale_masks(r, cfg.sigma, cfg.C)))
    return out


def make_batches(samples: Sequence[Sample], cfg: TrainConfig, epoch: int) -> list[list]:
    """Crops for one epoch, shuffled and grouped; reproducible from (seed, epoch)."""
    rng = crop_rng(cfg.seed, 0, epoch)
    spec = CropSpec(cfg.crop_size, cfg.samples_per_image, cfg.seed, cfg.hflip)
    crops = [(s.record.image_id, sample_crop(s.record, s.image, s.gt, s.masks, spec, rng))
             for s in samples for _ in range(cfg.samples_per_image)]
    order = rng.permutation(len(crops))
    crops = [crops[i] for i in order]
    return [crops[i:i + cfg.batch_size] for i in range(0, len(crops), cfg.batch_size)]


def collate(batch, dtype=torch.float32):
    img = torch.from_numpy(np.stack([c.image for _, c in batch])).permute(0, 3, 1, 2).to(dtype) / 255.0
    gt = torch.from_numpy(np.stack([c.gt for _, c in batch]))[:, None].to(dtype)
    masks = torch.from_numpy(np.stack([c.masks for _, c in batch])).to(dtype)
    return img, gt, masks


def _check_grads(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in layer {name}")


def train_step(model: MultiBranchNet, batch, optimizer: torch.optim.Optimizer,
               loss_cfg: LossConfig, loss_scale: float = 1.0) -> dict:
    """One gradient step on the combined loss; returns the (unscaled) loss breakdown.

    ``loss_scale`` multiplies the objective before backprop only. Raw
    densities are ~1e-4 per pixel, which puts gradients near Adam's epsilon.
    """
    img, gt, masks = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(img)
    losses = total_loss(out, gt, masks, loss_cfg)
    if not torch.isfinite(losses.total):
        raise TrainingError(f"non-finite loss {losses.total.item()}")
    (losses.total * loss_scale).backward()
    _check_grads(model)
    optimizer.step()
    return losses.as_dict()


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    # Adam moments/epsilon at their library defaults
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_initial)


def fit(model: Optional[MultiBranchNet], train_records: Sequence[ImageRecord],
        val_records: Sequence[ImageRecord], cfg: TrainConfig,
        out_dir: Optional[str | Path] = None) -> tuple[MultiBranchNet, History]:
    """Train ``model`` (built from ``cfg`` when None) and return it with its history.

    With ``out_dir`` set, writes ``last/`` and ``best/`` checkpoints (best by
    validation MAE, or the last one without validation data) and
    ``history.jsonl``.
    """
    seed_everything(cfg.seed, cfg.deterministic)
    if model is None:
        model = build_model(cfg.preset, cfg.C, cfg.init_std, cfg.aggregation)
    history = History()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.epochs == 0 or not train_records:
        return model, history

    train_records, edges = ensure_sizes(train_records, cfg)
    samples = prepare_samples(train_records, cfg)
    model.set_normalization(*pixel_stats([s.image for s in samples]))
    optimizer = make_optimizer(model, cfg)
    loss_cfg = LossConfig(cfg.lam, cfg.scale_loss)
    dtype = next(model.parameters()).dtype

    best_mae = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr
        for b, batch in enumerate(make_batches(samples, cfg, epoch)):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            try:
                row = train_step(model, collate(batch, dtype), optimizer, loss_cfg, cfg.loss_scale)
            except TrainingError as exc:
                if out_dir is not None:
                    repro = {"epoch": epoch, "batch": b, "step": step, "error": str(exc),
                             "crops": [{"image": i, "window": list(c.window)} for i, c in batch]}
                    (out_dir / "failed_batch.json").write_text(json.dumps(repro), encoding="utf-8")
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from None
            history.steps.append({"step": step, "epoch": epoch, "lr": lr, **row})
            step += 1

        ep = {"epoch": epoch}
        if val_records:
            res = evaluate(model, val_records, cfg.resolution_cap)
            ep.update(val_mae=res.mae, val_mse=res.mse)
            if res.mae < best_mae:
                best_mae = res.mae
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "best", {"epoch": epoch, "val_mae": res.mae})
        history.epochs.append(ep)
        log.info("epoch %d lr %.1e loss %.4g %s", epoch, lr,
                 history.steps[-1]["loss_total"] if history.steps else float("nan"),
                 {k: v for k, v in ep.items() if k != "epoch"})
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "last", {"epochs_run": len(history.epochs)})
        if not val_records:
            save_checkpoint(model, out_dir / "best", {"epochs_run": len(history.epochs)})
        if edges is not None:
            (out_dir / "bin_edges.json").write_text(json.dumps(list(edges.edges)), encoding="utf-8")
        history.write_jsonl(out_dir / "history.jsonl")
    return model, history


def train_set_eval(model: MultiBranchNet, records: Sequence[ImageRecord], cap: bool = False) -> EvalResult:
    return evaluate(model, records, resolution_cap=cap)
