"""Multi-branch density regressor with softmax attention fusion.

A staged convolutional backbone is tapped at C depths. Each tap feeds its own
regression head producing a density map; an attention head on the deepest
tap produces C logit maps whose per-pixel softmax weights the branch maps.
The fused map is resampled back to input resolution.

All density resampling is mass preserving: after bilinear interpolation the
values are rescaled by the area ratio so the sum (the count) is unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

AGGREGATIONS = ("attention", "average", "max", "concat")
CHECKPOINT_FORMAT = "msacount-checkpoint/1"


@dataclass(frozen=True)
class StageSpec:
    width: int
    convs: int
    # Max-pool factor applied at the start of the stage, so a stage's output
    # stride is the product of its own and all earlier factors.
    downsample: int = 2


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageSpec, ...]
    tap_points: tuple[int, ...]
    head_widths: tuple[int, ...] = (128, 64)
    preset: str = "custom"

    def __post_init__(self):
        taps = self.tap_points
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap_points must be strictly increasing, got {taps}")
        if taps[-1] != len(self.stages) - 1:
            raise ValueError("the last tap must be the final stage")

    @property
    def stage_strides(self) -> list[int]:
        out, s = [], 1
        for st in self.stages:
            s *= st.downsample
            out.append(s)
        return out

    @property
    def tap_strides(self) -> list[int]:
        strides = self.stage_strides
        return [strides[t] for t in self.tap_points]

    @property
    def final_stride(self) -> int:
        return self.stage_strides[-1]

    @classmethod
    def vgg16(cls) -> "BackboneConfig":
        """VGG-16 conv blocks; taps at conv3_3, conv4_3, conv5_3 (strides 4/8/16)."""
        stages = (StageSpec(64, 2, 1), StageSpec(128, 2, 2), StageSpec(256, 3, 2),
                  StageSpec(512, 3, 2), StageSpec(512, 3, 2))
        return cls(stages, (2, 3, 4), (128, 64), "vgg16")

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        stages = (StageSpec(16, 1, 2), StageSpec(32, 1, 2), StageSpec(64, 1, 2))
        return cls(stages, (0, 1, 2), (8, 8), "tiny")

    @classmethod
    def from_preset(cls, name: str) -> "BackboneConfig":
        presets = {"vgg16": cls.vgg16, "tiny": cls.tiny}
        if name not in presets:
            raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(presets)}")
        return presets[name]()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(tuple(StageSpec(**s) for s in d["stages"]), tuple(d["tap_points"]),
                   tuple(d["head_widths"]), d.get("preset", "custom"))


def resample_mass(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a density tensor (N, C, h, w), rescaled by the area ratio.

    The sum is exact for integer upsampling factors, which is all the model uses.
    """
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return y * ((h * w) / (size[0] * size[1]))


def resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class RegressionHead(nn.Sequential):
    """3x3 convs with ReLU at the given widths, then a linear 1x1 output layer."""

    def __init__(self, in_ch: int, widths: Sequence[int], out_ch: int = 1):
        layers: list[nn.Module] = []
        c = in_ch
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(inplace=True)]
            c = w
        layers.append(nn.Conv2d(c, out_ch, 1))
        super().__init__(*layers)


@dataclass
class ModelOutput:
    branch_maps: torch.Tensor          # (N, C, h, w) at the finest tap resolution
    fused_common: torch.Tensor         # (N, 1, h, w)
    final: torch.Tensor                # (N, 1, H, W), input resolution
    branch_full: torch.Tensor          # (N, C, H, W), branch maps at input resolution
    logits: Optional[torch.Tensor] = None   # (N, C, h, w), attention only
    masks: Optional[torch.Tensor] = None    # (N, C, h, w), attention only
    tap_shapes: list = field(default_factory=list)

    @property
    def counts(self) -> torch.Tensor:
        return self.final.sum(dim=(1, 2, 3))


def aggregate(branch_maps: torch.Tensor, strategy: str, masks: Optional[torch.Tensor] = None,
              fuse_conv: Optional[nn.Module] = None) -> torch.Tensor:
    """Fuse (N, C, h, w) branch maps into (N, 1, h, w)."""
    if strategy == "attention":
        if masks is None:
            raise ValueError("attention aggregation needs masks")
        return (masks * branch_maps).sum(dim=1, keepdim=True)
    if strategy == "average":
        return branch_maps.mean(dim=1, keepdim=True)
    if strategy == "max":
        return branch_maps.amax(dim=1, keepdim=True)
    if strategy == "concat":
        if fuse_conv is None:
            raise ValueError("concat aggregation needs a 1x1 fusion conv")
        return fuse_conv(branch_maps)
    raise ValueError(f"unknown aggregation strategy {strategy!r}; choose from {AGGREGATIONS}")


class MultiBranchNet(nn.Module):
    def __init__(self, cfg: BackboneConfig, C: Optional[int] = None, init_std: float = 0.0033,
                 aggregation: str = "attention"):
        super().__init__()
        C = len(cfg.tap_points) if C is None else C
        if C != len(cfg.tap_points):
            raise ValueError(f"C={C} does not match {len(cfg.tap_points)} tap points")
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation strategy {aggregation!r}; choose from {AGGREGATIONS}")
        self.cfg = cfg
        self.C = C
        self.init_std = init_std
        self.aggregation = aggregation

        stages = []
        c_in = 3
        for st in cfg.stages:
            layers: list[nn.Module] = []
            if st.downsample > 1:
                layers.append(nn.MaxPool2d(st.downsample))
            for _ in range(st.convs):
                layers += [nn.Conv2d(c_in, st.width, 3, padding=1), nn.ReLU(inplace=True)]
                c_in = st.width
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

        tap_ch = [cfg.stages[t].width for t in cfg.tap_points]
        self.heads = nn.ModuleList(RegressionHead(c, cfg.head_widths, 1) for c in tap_ch)
        self.attention_head = RegressionHead(tap_ch[-1], cfg.head_widths, C) if aggregation == "attention" else None
        self.fuse_conv = nn.Conv2d(C, 1, 1) if aggregation == "concat" else None

        self.register_buffer("pixel_mean", torch.zeros(3))
        self.register_buffer("pixel_std", torch.ones(3))
        self.reset_new_layers()

    def new_layers(self) -> list[nn.Module]:
        mods = list(self.heads)
        if self.attention_head is not None:
            mods.append(self.attention_head)
        return mods

    def reset_new_layers(self) -> None:
        for mod in self.new_layers():
            for m in mod.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.normal_(m.weight, 0.0, self.init_std)
                    nn.init.zeros_(m.bias)
        if self.fuse_conv is not None:
            # start as the plain average of the branches
            nn.init.constant_(self.fuse_conv.weight, 1.0 / self.C)
            nn.init.zeros_(self.fuse_conv.bias)

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]) -> None:
        self.pixel_mean.copy_(torch.as_tensor(mean, dtype=self.pixel_mean.dtype))
        self.pixel_std.copy_(torch.as_tensor(std, dtype=self.pixel_std.dtype))

    def forward(self, x: torch.Tensor) -> ModelOutput:
        """``x`` is (N, 3, H, W) with pixel values in [0, 1]."""
        H, W = x.shape[-2:]
        s = self.cfg.final_stride
        if H < s or W < s:
            raise ValueError(f"input {H}x{W} is smaller than the backbone stride {s}")
        ph, pw = (-H) % s, (-W) % s
        x = (x - self.pixel_mean.view(1, 3, 1, 1)) / self.pixel_std.view(1, 3, 1, 1)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        Hp, Wp = H + ph, W + pw

        taps = []
        feat = x
        for i, stage in enumerate(self.stages):
            feat = stage(feat)
            if i in self.cfg.tap_points:
                taps.append(feat)

        common = tuple(taps[0].shape[-2:])
        raw = [head(t) for head, t in zip(self.heads, taps)]
        branch = torch.cat([resample_mass(r, common) for r in raw], dim=1)

        logits = masks = None
        if self.attention_head is not None:
            logits = resample(self.attention_head(taps[-1]), common)
            masks = torch.softmax(logits, dim=1)
        fused = aggregate(branch, self.aggregation, masks, self.fuse_conv)
        if not self.training:
            # Only the fused map is clamped: branches may go negative where
            # the others compensate, and clipping them biases counts upward.
            fused = fused.clamp_min(0)

        final = resample_mass(fused, (Hp, Wp))[..., :H, :W]
        branch_full = resample_mass(branch, (Hp, Wp))[..., :H, :W]
        return ModelOutput(branch, fused, final, branch_full, logits, masks,
                           [tuple(t.shape[-2:]) for t in taps])


def build_model(cfg: BackboneConfig | str = "tiny", C: Optional[int] = None, init_std: float = 0.0033,
                aggregation: str = "attention", seed: Optional[int] = None) -> MultiBranchNet:
    if isinstance(cfg, str):
        cfg = BackboneConfig.from_preset(cfg)
    if seed is not None:
        torch.manual_seed(seed)
    return MultiBranchNet(cfg, C, init_std, aggregation)


def conv_param_count(cfg: BackboneConfig, aggregation: str = "attention") -> int:
    """Closed-form parameter count: sum of k*k*c_in*c_out + c_out over all convs."""
    def conv(k, ci, co):
        return k * k * ci * co + co

    total, c = 0, 3
    for st in cfg.stages:
        for _ in range(st.convs):
            total += conv(3, c, st.width)
            c = st.width

    def head(ci, co):
        n, c = 0, ci
        for w in cfg.head_widths:
            n += conv(3, c, w)
            c = w
        return n + conv(1, c, co)

    C = len(cfg.tap_points)
    for t in cfg.tap_points:
        total += head(cfg.stages[t].width, 1)
    if aggregation == "attention":
        total += head(cfg.stages[cfg.tap_points[-1]].width, C)
    elif aggregation == "concat":
        total += conv(1, C, 1)
    return total


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 or float image -> (1, 3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    t = torch.from_numpy(np.array(arr[..., :3])).permute(2, 0, 1).float()
    if arr.dtype == np.uint8:
        t = t / 255.0
    return t.unsqueeze(0)


@torch.no_grad()
def predict_density(model: MultiBranchNet, image: np.ndarray) -> np.ndarray:
    """Inference on one (H, W, 3) image; returns the (H, W) density map."""
    was_training = model.training
    model.eval()
    try:
        p = next(model.parameters())
        out = model(image_to_tensor(image).to(dtype=p.dtype, device=p.device))
    finally:
        model.train(was_training)
    return out.final[0, 0].cpu().numpy()


def save_checkpoint(model: MultiBranchNet, path: str | Path, extra: Optional[dict] = None) -> Path:
    """Write a checkpoint directory: ``topology.json`` plus one raw float32 blob per tensor."""
    path = Path(path)
    (path / "weights").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for key, t in model.state_dict().items():
        fname = f"weights/{key}.f32"
        arr = t.detach().cpu().numpy().astype("<f4")
        (path / fname).write_bytes(arr.tobytes(order="C"))
        tensors[key] = {"file": fname, "shape": list(arr.shape)}
    topo = {
        "format": CHECKPOINT_FORMAT,
        "backbone": model.cfg.to_dict(),
        "C": model.C,
        "init_std": model.init_std,
        "aggregation": model.aggregation,
        "tensors": tensors,
    }
    if extra:
        topo["extra"] = extra
    (path / "topology.json").write_text(json.dumps(topo, indent=1), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> MultiBranchNet:
    path = Path(path)
    topo = json.loads((path / "topology.json").read_text(encoding="utf-8"))
    if topo.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {topo.get('format')!r}")
    model = MultiBranchNet(BackboneConfig.from_dict(topo["backbone"]), topo["C"],
                           topo["init_std"], topo["aggregation"])
    state = {}
    for key, meta in topo["tensors"].items():
        arr = np.frombuffer((path / meta["file"]).read_bytes(), dtype="<f4").reshape(meta["shape"])
        state[key] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model
