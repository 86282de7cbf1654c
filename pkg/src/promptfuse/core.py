"""Feature maps, the residual image backbone and the feature-pyramid merge."""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError


class Role(enum.Enum):
    IMAGE_SCALE = "image_scale"
    BEV = "bev"
    MS_BEV = "ms_bev"


@dataclass
class FeatureMap:
    """Dense ``(C, H, W)`` array, optionally with a leading batch axis."""

    values: torch.Tensor
    role: Role = Role.IMAGE_SCALE

    def __post_init__(self):
        if self.values.dim() not in (3, 4):
            raise DimensionError(f"FeatureMap expects (C,H,W) or (B,C,H,W), got shape {tuple(self.values.shape)}")

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.values).all())

    def batched(self) -> torch.Tensor:
        return self.values if self.values.dim() == 4 else self.values.unsqueeze(0)

    def like(self, values: torch.Tensor, role: Role | None = None) -> "FeatureMap":
        """Wrap ``values`` with the same batch convention as ``self``."""
        if self.values.dim() == 3 and values.dim() == 4:
            values = values.squeeze(0)
        return FeatureMap(values, role or self.role)


# ---------------------------------------------------------------------------
# seeded initialisation

def name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).hexdigest()
    return int(digest[:15], 16)


def seeded_uniform(shape, bound: float, seed: int, name: str) -> torch.Tensor:
    g = torch.Generator().manual_seed(name_seed(seed, name))
    return (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1).mul_(bound).float()


def init_weight(param: torch.Tensor, seed: int, name: str, blocks: Sequence[tuple[str, int]] | None = None,
                gain: float = math.sqrt(2.0)):
    """Uniform(-b, b) with ``b = gain * sqrt(3 / fan_in)``, keyed by the parameter name.

    ``gain`` sqrt(2) preserves activation variance through a following ReLU
    and 1 through a linear output; there is no normalisation layer anywhere,
    so the model picks the gain per layer. Biases start at zero.

    For a weight whose input channels are split into ``blocks``, only the
    first block is drawn; the remaining columns are zero. The draw uses the
    first block's shape, so a widened layer starts with exactly the weights
    of its unwidened twin.
    """
    with torch.no_grad():
        if param.dim() < 2:
            param.zero_()
            return
        first = blocks[0][1] if blocks else param.shape[1]
        shape = (param.shape[0], first, *param.shape[2:])
        bound = gain * math.sqrt(3.0 / (first * math.prod(param.shape[2:])))
        param.zero_()
        param[:, :first] = seeded_uniform(shape, bound, seed, name)


# ---------------------------------------------------------------------------
# backbone

class ResidualStage(nn.Module):
    """``x -> L(x) + W x`` with ``L`` = conv3x3 -> ReLU -> conv3x3.

    ``W`` is a 1x1 projection carrying the stage stride. Spatial size is
    divided by the stride, rounding down.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2, stage_index: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.stage_index = stage_index
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.proj = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    @property
    def trainable(self) -> bool:
        return all(p.requires_grad for p in self.parameters())

    def _crop(self, y: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return y[..., : h // self.stride, : w // self.stride]

    def layer(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        return self.conv2(F.relu(self._crop(self.conv1(x), h, w)))

    def projection(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        return self._crop(self.proj(x), h, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layer(x) + self.projection(x)


class ImageBackbone(nn.Module):
    def __init__(self, in_channels: int, channels: Sequence[int], strides: Sequence[int]):
        super().__init__()
        self.num_stages = len(channels)
        prev = in_channels
        for i, (c, s) in enumerate(zip(channels, strides), start=1):
            self.add_module(f"stage{i}", ResidualStage(prev, c, s, stage_index=i))
            prev = c

    def stages(self) -> list[ResidualStage]:
        return [getattr(self, f"stage{i}") for i in range(1, self.num_stages + 1)]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for stage in self.stages():
            x = stage(x)
            outs.append(x)
        return outs


def residual_stage(x: FeatureMap, stage: ResidualStage) -> FeatureMap:
    if x.channels != stage.in_channels:
        raise DimensionError(
            f"stage {stage.stage_index}: expected {stage.in_channels} input channels, got {x.channels}")
    return x.like(stage(x.batched()))


def run_backbone(image: FeatureMap, stages: Sequence[ResidualStage]) -> list[FeatureMap]:
    """Apply ``stages`` in order and return every stage output."""
    if not stages:
        raise DimensionError("backbone needs at least one stage")
    maps, x = [], image
    for stage in stages:
        if x.channels != stage.in_channels:
            raise DimensionError(
                f"stage {stage.stage_index}: expected {stage.in_channels} input channels, got {x.channels}")
        x = residual_stage(x, stage)
        maps.append(x)
    return maps


# ---------------------------------------------------------------------------
# feature pyramid

class FPN(nn.Module):
    """Lateral 1x1 projections plus a nearest-neighbour top-down pathway."""

    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.in_channels = list(in_channels)
        self.out_channels = out_channels
        for i, c in enumerate(self.in_channels, start=1):
            self.add_module(f"lateral{i}", nn.Conv2d(c, out_channels, 1))

    def laterals(self) -> list[nn.Conv2d]:
        return [getattr(self, f"lateral{i}") for i in range(1, len(self.in_channels) + 1)]

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != len(self.in_channels):
            raise DimensionError(f"FPN expects {len(self.in_channels)} levels, got {len(feats)}")
        lats = []
        for i, (f, lat) in enumerate(zip(feats, self.laterals()), start=1):
            if f.shape[-3] != lat.in_channels:
                raise DimensionError(f"FPN level {i}: expected {lat.in_channels} channels, got {f.shape[-3]}")
            lats.append(lat(f))
        outs = [lats[-1]]
        for lat in reversed(lats[:-1]):
            outs.insert(0, lat + F.interpolate(outs[0], size=lat.shape[-2:], mode="nearest"))
        return outs


def fpn_merge(maps: Sequence[FeatureMap], fpn: FPN) -> list[FeatureMap]:
    outs = fpn([m.batched() for m in maps])
    return [m.like(o) for m, o in zip(maps, outs)]
