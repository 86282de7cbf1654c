"""BEV-side layers: LiDAR encoder, BEV conversion, fusion encoder, BEV
backbone, dense head, and box decoding with rotated NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core import FPN, FeatureMap, Role, fpn_merge
from .errors import ConfigError, DimensionError
from .geometry import rotated_iou, wrap_angle

FUSION_KERNELS = (1, 3, 5, 7)
HEATMAP_PRIOR = 0.1


@dataclass
class DetectionBox:
    """A BEV box in grid units; ``sx`` runs along the heading ``yaw``."""

    class_id: int
    center_x: float
    center_y: float
    size_x: float
    size_y: float
    yaw: float
    score: float = 1.0

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.center_x, self.center_y, self.size_x, self.size_y, self.yaw)

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "center_x": self.center_x, "center_y": self.center_y,
                "size_x": self.size_x, "size_y": self.size_y, "yaw": self.yaw, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionBox":
        return cls(int(d["class_id"]), float(d["center_x"]), float(d["center_y"]), float(d["size_x"]),
                   float(d["size_y"]), float(d["yaw"]), float(d.get("score", 1.0)))


class LidarEncoder(nn.Module):
    """Two 3x3 conv layers over the pseudo-LiDAR planes."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class BEVConverter(nn.Module):
    """Builds the multi-modal BEV features.

    Each image pyramid level is resampled onto the BEV grid (the pseudo
    camera is grid-aligned), the levels are averaged and projected by a
    1x1 conv, then concatenated with the encoded LiDAR
    channels and, when present, the point foundation map.
    """

    def __init__(self, image_channels: int, out_channels: int):
        super().__init__()
        self.out_channels = out_channels
        self.image_proj = nn.Conv2d(image_channels, out_channels, 1)

    def forward(self, image_feats: Sequence[torch.Tensor] | None, lidar_feat: torch.Tensor,
                point_map: torch.Tensor | None = None) -> torch.Tensor:
        b, _, h, w = lidar_feat.shape
        if image_feats is None:
            img = lidar_feat.new_zeros(b, self.out_channels, h, w)
        else:
            pooled = sum(F.interpolate(f, size=(h, w), mode="bilinear", align_corners=False)
                         for f in image_feats) / len(image_feats)
            img = self.image_proj(pooled)
        parts = [img, lidar_feat]
        if point_map is not None:
            if point_map.shape[-2:] != (h, w):
                raise DimensionError(f"point map is {tuple(point_map.shape[-2:])}, grid is {(h, w)}")
            parts.append(point_map)
        return torch.cat(parts, dim=1)


class FusionEncoder(nn.Module):
    """Four parallel one-layer convs (kernels 1/3/5/7, C/4 outputs each)
    whose concatenated outputs are mixed by a 1x1 conv back to C."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.channels = channels
        for k in FUSION_KERNELS:
            self.add_module(f"branch{k}", nn.Conv2d(in_channels, channels // 4, k, padding=k // 2))
        self.fuse = nn.Conv2d(channels // 4 * len(FUSION_KERNELS), channels, 1)

    def branches(self) -> list[nn.Conv2d]:
        return [getattr(self, f"branch{k}") for k in FUSION_KERNELS]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise DimensionError(f"fusion encoder expects {self.in_channels} channels, got {x.shape[-3]}")
        y = torch.cat([F.relu(b(x)) for b in self.branches()], dim=1)
        return F.relu(self.fuse(y))


class BEVBackbone(nn.Module):
    """Two blocks: ``C/2`` channels at full grid, ``C`` channels at half grid."""

    def __init__(self, channels: int):
        super().__init__()
        half = channels // 2
        self.block1 = nn.Sequential()
        self.block1.add_module("conv1", nn.Conv2d(channels, half, 3, padding=1))
        self.block1.add_module("conv2", nn.Conv2d(half, half, 3, padding=1))
        self.block2 = nn.Sequential()
        self.block2.add_module("conv1", nn.Conv2d(half, channels, 3, stride=2, padding=1))
        self.block2.add_module("conv2", nn.Conv2d(channels, channels, 3, padding=1))
        self.channels = channels

    @staticmethod
    def _run(block: nn.Sequential, x: torch.Tensor) -> torch.Tensor:
        return F.relu(block.conv2(F.relu(block.conv1(x))))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ConfigError(f"BEV grid must be even to downsample, got {h}x{w}")
        f1 = self._run(self.block1, x)
        return [f1, self._run(self.block2, f1)]


class DenseHead(nn.Module):
    """Shared 3x3 conv, then per-cell heatmap / offset / log-size / yaw."""

    def __init__(self, in_channels: int, channels: int, num_classes: int):
        super().__init__()
        self.shared = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.heatmap = nn.Conv2d(channels, num_classes, 1)
        self.offset = nn.Conv2d(channels, 2, 1)
        self.size = nn.Conv2d(channels, 2, 1)
        self.yaw = nn.Conv2d(channels, 2, 1)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        y = F.relu(self.shared(x))
        return {"heatmap": self.heatmap(y), "offset": self.offset(y),
                "log_size": self.size(y), "yaw": self.yaw(y)}


# ---------------------------------------------------------------------------
# functional wrappers over FeatureMaps

def to_bev(image_feats: Sequence[FeatureMap] | None, lidar_feat: FeatureMap, converter: BEVConverter,
           point_map: FeatureMap | None = None) -> FeatureMap:
    if lidar_feat.role != Role.BEV:
        raise DimensionError("to_bev needs a BEV-role LiDAR feature map")
    imgs = None if image_feats is None else [f.batched() for f in image_feats]
    out = converter(imgs, lidar_feat.batched(), None if point_map is None else point_map.batched())
    return lidar_feat.like(out, Role.BEV)


def fuse_bev(f: FeatureMap, encoder: FusionEncoder) -> FeatureMap:
    return f.like(encoder(f.batched()), Role.BEV)


def bev_backbone(f: FeatureMap, backbone: BEVBackbone) -> list[FeatureMap]:
    if f.channels != backbone.channels:
        raise DimensionError(f"BEV backbone expects {backbone.channels} channels, got {f.channels}")
    return [f.like(o, Role.MS_BEV) for o in backbone(f.batched())]


def bev_fpn(feats: Sequence[FeatureMap], fpn: FPN) -> list[FeatureMap]:
    return [FeatureMap(o.values, Role.MS_BEV) for o in fpn_merge(feats, fpn)]


# ---------------------------------------------------------------------------
# decoding

def local_maxima(heat: torch.Tensor) -> torch.Tensor:
    """Boolean mask of cells equal to the max of their 3x3 neighbourhood."""
    pooled = F.max_pool2d(heat.unsqueeze(0), 3, stride=1, padding=1).squeeze(0)
    return heat == pooled


def rotated_nms(boxes: list[DetectionBox], iou_threshold: float) -> list[DetectionBox]:
    """Greedy per-class suppression; input order breaks score ties."""
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    keep: list[DetectionBox] = []
    for i in order:
        b = boxes[i]
        if all(k.class_id != b.class_id or rotated_iou(k.as_tuple(), b.as_tuple()) <= iou_threshold
               for k in keep):
            keep.append(b)
    return keep


def decode_boxes(heat: torch.Tensor, offset: torch.Tensor, log_size: torch.Tensor, yaw: torch.Tensor,
                 score_floor: float = 0.1, nms_iou: float = 0.5, max_detections: int = 50) -> list[DetectionBox]:
    """Turn one sample's head maps into boxes.

    ``heat`` holds probabilities ``(K, H, W)``; the other maps are
    ``(2, H, W)``. Centre = cell index + 0.5 + offset (x along columns).
    """
    heat = heat.detach().float()
    peaks = local_maxima(heat) & (heat >= score_floor)
    idx = peaks.nonzero(as_tuple=False)
    if idx.numel() == 0:
        return []
    scores = heat[idx[:, 0], idx[:, 1], idx[:, 2]]
    order = torch.argsort(-scores, stable=True)[:max_detections]
    off, ls, yw = offset.detach().float(), log_size.detach().float(), yaw.detach().float()
    boxes = []
    for j in order.tolist():
        k, r, c = (int(v) for v in idx[j])
        boxes.append(DetectionBox(
            class_id=k,
            center_x=c + 0.5 + float(off[0, r, c]),
            center_y=r + 0.5 + float(off[1, r, c]),
            size_x=math.exp(min(float(ls[0, r, c]), 10.0)),
            size_y=math.exp(min(float(ls[1, r, c]), 10.0)),
            yaw=wrap_angle(math.atan2(float(yw[0, r, c]), float(yw[1, r, c]))),
            score=float(scores[j]),
        ))
    return rotated_nms(boxes, nms_iou)


def detect_head(outputs: dict[str, torch.Tensor], score_floor: float = 0.1, nms_iou: float = 0.5,
                max_detections: int = 50) -> list[list[DetectionBox]]:
    """Decode batched head outputs (heatmap as logits) into per-sample boxes."""
    heat = torch.sigmoid(outputs["heatmap"])
    return [decode_boxes(heat[b], outputs["offset"][b], outputs["log_size"][b], outputs["yaw"][b],
                         score_floor, nms_iou, max_detections)
            for b in range(heat.shape[0])]


def heatmap_bias() -> float:
    return -math.log((1 - HEATMAP_PRIOR) / HEATMAP_PRIOR)
