"""Frozen foundation-encoder stubs and the layers that inject their vectors.

The stubs stand in for large pretrained encoders: small fixed-seed networks
with the same output widths (768 / 1024 for the image towers, 256 for the
point tower). They are never trained. Like contrastive embeddings, their
outputs are L2-normalised.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import IMAGE_ENCODERS, POINT_ENCODERS, ModelConfig
from .core import FeatureMap, Role, init_weight
from .errors import ConfigError, DimensionError

STUB_INPUT_SIZE = (224, 224)


class Modality(enum.Enum):
    IMAGE = "image"
    POINT = "point"


@dataclass
class FoundationVector:
    values: torch.Tensor  # (d,) or (B, d)
    modality: Modality
    encoder_id: str

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class FoundationConfig:
    image_encoder: str = "none"
    point_encoder: str = "none"
    point_compress_channels: int = 16
    point_upsample_mode: str = "learned"
    foundation_seed: int = 0

    def __post_init__(self):
        if self.image_encoder not in IMAGE_ENCODERS or self.point_encoder not in POINT_ENCODERS:
            raise ConfigError(f"unknown encoder in {self}")
        if self.point_encoder != "none" and not 1 <= self.point_compress_channels <= 256:
            raise ConfigError("point_compress_channels must lie in [1, 256]")

    @classmethod
    def from_model(cls, cfg: ModelConfig) -> "FoundationConfig":
        return cls(cfg.image_encoder, cfg.point_encoder, cfg.point_compress_channels,
                   cfg.point_upsample_mode, cfg.foundation_seed)


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class ImageFoundationStub(nn.Module):
    """Patch-embedding conv, pooling, pointwise conv, global mean.

    Input images are resized to 224x224 first.
    """

    def __init__(self, encoder_id: str, seed: int, in_channels: int = 3, hidden: int = 32):
        super().__init__()
        if encoder_id not in IMAGE_ENCODERS or encoder_id == "none":
            raise ConfigError(f"no image foundation encoder for {encoder_id!r}")
        self.encoder_id = encoder_id
        self.dim = IMAGE_ENCODERS[encoder_id]
        self.conv1 = nn.Conv2d(in_channels, hidden, 8, stride=8)
        self.conv2 = nn.Conv2d(hidden, self.dim, 1)
        for name, p in self.named_parameters():
            init_weight(p, seed, f"{encoder_id}.{name}")
        _freeze(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(image, size=STUB_INPUT_SIZE, mode="bilinear", align_corners=False)
        x = F.avg_pool2d(F.relu(self.conv1(x)), 2)
        return F.normalize(F.relu(self.conv2(x)).mean(dim=(-2, -1)), dim=-1)


class PointFoundationStub(nn.Module):
    """Per-point MLP followed by a max-pool over points.

    Every BEV cell with positive occupancy (plane 0) is one point whose
    features are its normalised grid position plus the plane values.
    """

    def __init__(self, encoder_id: str, seed: int, lidar_channels: int = 3, hidden: int = 64):
        super().__init__()
        if encoder_id not in POINT_ENCODERS or encoder_id == "none":
            raise ConfigError(f"no point foundation encoder for {encoder_id!r}")
        self.encoder_id = encoder_id
        self.dim = POINT_ENCODERS[encoder_id]
        self.mlp1 = nn.Conv2d(lidar_channels + 2, hidden, 1)
        self.mlp2 = nn.Conv2d(hidden, self.dim, 1)
        for name, p in self.named_parameters():
            init_weight(p, seed, f"{encoder_id}.{name}")
        with torch.no_grad():
            self.mlp1.bias.fill_(0.1)
        _freeze(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, lidar: torch.Tensor) -> torch.Tensor:
        b, _, h, w = lidar.shape
        ys = torch.linspace(-1, 1, h, dtype=lidar.dtype).view(1, 1, h, 1).expand(b, 1, h, w)
        xs = torch.linspace(-1, 1, w, dtype=lidar.dtype).view(1, 1, 1, w).expand(b, 1, h, w)
        x = torch.cat([xs, ys, lidar], dim=1)
        feats = self.mlp2(F.relu(self.mlp1(x)))
        valid = (lidar[:, :1] > 0).expand_as(feats)
        feats = feats.masked_fill(~valid, float("-inf")).amax(dim=(-2, -1))
        return F.normalize(torch.where(torch.isfinite(feats), feats, torch.zeros_like(feats)), dim=-1)


@functools.lru_cache(maxsize=8)
def image_stub(encoder_id: str, seed: int) -> ImageFoundationStub:
    return ImageFoundationStub(encoder_id, seed)


@functools.lru_cache(maxsize=8)
def point_stub(encoder_id: str, seed: int, lidar_channels: int = 3) -> PointFoundationStub:
    return PointFoundationStub(encoder_id, seed, lidar_channels)


def encode_image_foundation(image: FeatureMap, cfg: FoundationConfig) -> FoundationVector:
    if cfg.image_encoder == "none":
        raise ConfigError("image foundation encoder is disabled")
    stub = image_stub(cfg.image_encoder, cfg.foundation_seed)
    with torch.no_grad():
        v = stub(image.batched().float())
    if image.values.dim() == 3:
        v = v.squeeze(0)
    return FoundationVector(v, Modality.IMAGE, cfg.image_encoder)


def encode_point_foundation(lidar: FeatureMap | torch.Tensor, cfg: FoundationConfig) -> FoundationVector:
    if cfg.point_encoder == "none":
        raise ConfigError("point foundation encoder is disabled")
    lidar = lidar if isinstance(lidar, FeatureMap) else FeatureMap(lidar, Role.BEV)
    stub = point_stub(cfg.point_encoder, cfg.foundation_seed, lidar.channels)
    with torch.no_grad():
        v = stub(lidar.batched().float())
    if lidar.values.dim() == 3:
        v = v.squeeze(0)
    return FoundationVector(v, Modality.POINT, cfg.point_encoder)


def broadcast_vector(v: FoundationVector | torch.Tensor, h: int, w: int, role: Role = Role.IMAGE_SCALE) -> FeatureMap:
    """Repeat a ``(d,)`` or ``(B, d)`` vector at every cell of an ``h x w`` grid."""
    if h < 1 or w < 1:
        raise DimensionError(f"broadcast target must be at least 1x1, got {h}x{w}")
    vals = v.values if isinstance(v, FoundationVector) else v
    return FeatureMap(vals[..., :, None, None].expand(*vals.shape, h, w), role)


def concat_foundation(x_last: FeatureMap, vmap: FeatureMap | None) -> FeatureMap:
    if vmap is None or vmap.channels == 0:
        return x_last
    if (vmap.height, vmap.width) != (x_last.height, x_last.width):
        raise DimensionError(
            f"foundation map is {vmap.height}x{vmap.width} but feature map is {x_last.height}x{x_last.width}")
    a, b = x_last.batched(), vmap.batched()
    if b.shape[0] != a.shape[0]:
        b = b.expand(a.shape[0], *b.shape[1:])
    return x_last.like(torch.cat([a, b], dim=1))


class ChannelCompressor(nn.Module):
    """Learned linear projection of the point vector down to ``out_features``."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        if not 1 <= out_features <= in_features:
            raise ConfigError(f"compressed size must lie in [1, {in_features}], got {out_features}")
        self.linear = nn.Linear(in_features, out_features)

    def identity_(self) -> "ChannelCompressor":
        with torch.no_grad():
            self.linear.weight.zero_()
            n = min(self.linear.in_features, self.linear.out_features)
            self.linear.weight[:n, :n] = torch.eye(n)
            self.linear.bias.zero_()
        return self

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.linear(v)


def compress_channels(v: FoundationVector, compressor: ChannelCompressor) -> FoundationVector:
    if v.dim != compressor.linear.in_features:
        raise ConfigError(f"compressor expects {compressor.linear.in_features} inputs, got {v.dim}")
    return FoundationVector(compressor(v.values), v.modality, v.encoder_id)


class PointUpsampler(nn.Module):
    """Lift a ``(B, C)`` vector to a ``(B, C, H, W)`` map.

    ``repeat`` broadcasts. ``learned`` runs factor-2 transposed 3x3 convs
    from 1x1 up to the largest power of two not above ``min(H, W)``, then a
    bilinear resize. The last transposed conv starts at zero.
    """

    def __init__(self, channels: int, target: tuple[int, int], mode: str = "learned"):
        super().__init__()
        h, w = target
        if mode not in ("repeat", "learned"):
            raise ConfigError(f"unknown upsample mode {mode!r}")
        if h < 1 or w < 1 or (mode == "learned" and min(h, w) < 2):
            raise ConfigError(f"upsampler target {h}x{w} unsupported; learned mode needs both sides >= 2")
        self.channels = channels
        self.target = (h, w)
        self.mode = mode
        self.num_steps = int(math.floor(math.log2(min(h, w)))) if mode == "learned" else 0
        for i in range(1, self.num_steps + 1):
            self.add_module(f"up{i}", nn.ConvTranspose2d(channels, channels, 3, stride=2,
                                                         padding=1, output_padding=1))

    def zero_last_(self) -> "PointUpsampler":
        if self.num_steps:
            last = getattr(self, f"up{self.num_steps}")
            with torch.no_grad():
                last.weight.zero_()
                last.bias.zero_()
        return self

    def forward(self, v: torch.Tensor, h: int | None = None, w: int | None = None) -> torch.Tensor:
        h = self.target[0] if h is None else h
        w = self.target[1] if w is None else w
        if self.mode == "repeat":
            return broadcast_vector(v, h, w).values
        if (h, w) != self.target:
            raise ConfigError(f"learned upsampler supports only {self.target[0]}x{self.target[1]}, got {h}x{w}")
        x = v[..., :, None, None]
        for i in range(1, self.num_steps + 1):
            x = getattr(self, f"up{i}")(x)
            if i < self.num_steps:
                x = F.relu(x)
        if x.shape[-2:] != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return x


def upsample_point_features(v: FoundationVector, mode: str, h: int, w: int,
                            upsampler: PointUpsampler | None = None) -> FeatureMap:
    if mode == "repeat":
        return broadcast_vector(v, h, w, Role.BEV)
    if upsampler is None or upsampler.mode != "learned":
        raise ConfigError("learned upsampling needs a PointUpsampler in learned mode")
    vals = v.values
    out = upsampler(vals if vals.dim() == 2 else vals.unsqueeze(0), h, w)
    return FeatureMap(out if vals.dim() == 2 else out.squeeze(0), Role.BEV)
