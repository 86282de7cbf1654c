"""Model configuration record, presets and the stable config hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

IMAGE_ENCODERS = {"none": 0, "vit_l_stub": 768, "resnet50_stub": 1024}
POINT_ENCODERS = {"none": 0, "pointbert_stub": 256}
UPSAMPLE_MODES = ("repeat", "learned")
MODES = ("baseline", "fm_only", "prompt_only", "pf3det")


@dataclass(frozen=True)
class PromptChannels:
    """Channel count per prompt level; 0 disables the level."""

    level1: int = 0
    level2: int = 0
    level3a: int = 0
    level3b: int = 0

    @property
    def enabled(self) -> bool:
        return any(c > 0 for c in self.as_tuple())

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.level1, self.level2, self.level3a, self.level3b)


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build a model. One record fully determines it."""

    image_size: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 256)
    backbone_strides: tuple[int, ...] = (2, 2, 2, 2)
    fpn_channels: int = 32
    image_encoder: str = "none"
    point_encoder: str = "none"
    point_compress_channels: int = 16
    point_upsample_mode: str = "learned"
    foundation_seed: int = 0
    lidar_channels: int = 3
    bev_channels: int = 64
    grid: tuple[int, int] = (36, 36)
    bev_fpn_channels: int = 32
    head_channels: int = 32
    num_classes: int = 4
    prompts: PromptChannels = field(default_factory=PromptChannels)
    score_floor: float = 0.1
    nms_iou: float = 0.5
    max_detections: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.backbone_channels) != len(self.backbone_strides) or not self.backbone_channels:
            raise ConfigError("backbone_channels and backbone_strides must be non-empty and equal length")
        if any(c < 1 for c in self.backbone_channels) or any(s < 1 for s in self.backbone_strides):
            raise ConfigError("backbone channels and strides must be positive")
        if self.image_encoder not in IMAGE_ENCODERS:
            raise ConfigError(f"unknown image_encoder {self.image_encoder!r}; expected one of {sorted(IMAGE_ENCODERS)}")
        if self.point_encoder not in POINT_ENCODERS:
            raise ConfigError(f"unknown point_encoder {self.point_encoder!r}; expected one of {sorted(POINT_ENCODERS)}")
        if self.point_upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"unknown point_upsample_mode {self.point_upsample_mode!r}")
        if self.point_encoder != "none" and not 1 <= self.point_compress_channels <= POINT_ENCODERS[self.point_encoder]:
            raise ConfigError("point_compress_channels must lie in [1, 256] when the point encoder is enabled")
        if self.bev_channels < 4 or self.bev_channels % 4:
            raise ConfigError("bev_channels must be a positive multiple of 4")
        h, w = self.grid
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ConfigError(f"BEV grid must be even in both axes, got {self.grid}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if any(c < 0 for c in self.prompts.as_tuple()):
            raise ConfigError("prompt channel counts must be >= 0")

    # derived quantities
    @property
    def image_fm_dim(self) -> int:
        return IMAGE_ENCODERS[self.image_encoder]

    @property
    def point_fm_channels(self) -> int:
        return self.point_compress_channels if self.point_encoder != "none" else 0

    @property
    def uses_foundation(self) -> bool:
        return self.image_encoder != "none" or self.point_encoder != "none"

    @property
    def uses_prompts(self) -> bool:
        return self.prompts.enabled

    def without_prompts(self) -> "ModelConfig":
        return dataclasses.replace(self, prompts=PromptChannels())

    def without_foundation(self) -> "ModelConfig":
        return dataclasses.replace(self, image_encoder="none", point_encoder="none")

    def baseline(self) -> "ModelConfig":
        return self.without_prompts().without_foundation()

    def replace(self, **changes) -> "ModelConfig":
        if "prompts" in changes and not isinstance(changes["prompts"], PromptChannels):
            changes["prompts"] = PromptChannels(*changes["prompts"])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("image_size", "backbone_channels", "backbone_strides", "grid"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "prompts" in kw:
            p = kw["prompts"]
            kw["prompts"] = PromptChannels(**p) if isinstance(p, dict) else PromptChannels(*p)
        return cls(**kw)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def stable_hash(obj: Any, length: int = 16) -> str:
    """Hash over canonicalized JSON text, so it is stable across platforms."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def desk_config(**changes) -> ModelConfig:
    return ModelConfig().replace(**changes) if changes else ModelConfig()


def paper_config(**changes) -> ModelConfig:
    """Nominal dimensions: 448x800 images, C=256 on a 180x180 BEV grid.

    The image backbone is kept narrow (64..512 channels); only the BEV side
    carries the published widths.
    """
    cfg = ModelConfig(
        image_size=(448, 800),
        backbone_channels=(64, 128, 256, 512),
        backbone_strides=(4, 2, 2, 2),
        fpn_channels=64,
        point_compress_channels=50,
        lidar_channels=3,
        bev_channels=256,
        grid=(180, 180),
        bev_fpn_channels=64,
        head_channels=64,
        num_classes=10,
    )
    return cfg.replace(**changes) if changes else cfg


def default_config() -> ModelConfig:
    """Desk preset unless PF_DESK=0 asks for nominal dimensions."""
    return paper_config() if os.environ.get("PF_DESK", "1") == "0" else desk_config()


def mode_config(mode: str, base: ModelConfig | None = None) -> ModelConfig:
    """Map an ablation mode name onto a config.

    ``prompt_only`` and ``pf3det`` use two prompt levels sized like the final
    published model, scaled to the BEV width (100 and 150 at C=256).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    base = (base or desk_config()).baseline()
    c = base.bev_channels
    prompts = PromptChannels(level1=max(1, round(100 * c / 256)), level2=max(1, round(150 * c / 256)))
    if mode == "baseline":
        return base
    if mode == "fm_only":
        return base.replace(image_encoder="vit_l_stub")
    if mode == "prompt_only":
        return base.replace(prompts=prompts)
    return base.replace(image_encoder="vit_l_stub", prompts=prompts)
