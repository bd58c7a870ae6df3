"""Pixel-wise l2 density loss, masked per-branch scale loss and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .network import ModelOutput


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    scale_loss_enabled: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    final_l2: torch.Tensor
    sc: list[torch.Tensor]

    def as_dict(self) -> dict:
        return {"loss_total": self.total.item(), "loss_final_l2": self.final_l2.item(),
                "loss_sc": [t.item() for t in self.sc]}


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l2_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared error; batched inputs are also averaged over N."""
    _check_shapes(pred, gt, "l2_loss")
    return ((pred - gt) ** 2).mean()


def scale_aware_loss(branch_pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
                     check_binary: bool = True) -> torch.Tensor:
    """Squared error restricted to ``mask`` but normalised by the full pixel count.

    Pixels outside the mask contribute nothing, so predictions there are free.
    """
    _check_shapes(branch_pred, gt, "scale_aware_loss")
    _check_shapes(mask, gt, "scale_aware_loss mask")
    if check_binary and not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("scale_aware_loss: mask must be binary")
    m = mask.to(branch_pred.dtype)
    # where() rather than a product so out-of-mask values cannot leak in via inf/nan
    sq = torch.where(m > 0, (branch_pred - gt) ** 2, torch.zeros_like(branch_pred))
    return sq.mean()


def total_loss(output: ModelOutput, gt: torch.Tensor, masks: torch.Tensor,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """``l2(final, gt) + lam * sum_c scale_loss(D_c, gt, S_c)`` at input resolution.

    ``gt`` is (N, 1, H, W) and ``masks`` (N, C, H, W).
    """
    final_l2 = l2_loss(output.final, gt)
    C = output.branch_full.shape[1]
    if masks.shape[1] != C:
        raise ValueError(f"model has {C} branches but {masks.shape[1]} scale masks were given")
    sc = []
    if cfg.scale_loss_enabled:
        if masks.dtype != torch.bool and not bool(((masks == 0) | (masks == 1)).all()):
            raise ValueError("scale masks must be binary")
        for c in range(C):
            sc.append(scale_aware_loss(output.branch_full[:, c:c + 1], gt, masks[:, c:c + 1],
                                       check_binary=False))
    total = final_l2
    if sc and cfg.lam:
        total = total + cfg.lam * torch.stack(sc).sum()
    return LossBreakdown(total, final_l2, sc)
