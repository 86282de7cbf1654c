"""Soft prompts for convolutional BEV layers and the freeze contract."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .core import FeatureMap, Role, seeded_uniform
from .errors import ConfigError, DimensionError, RegistryError

PROMPT_INIT_BOUND = 0.01
LEVELS = ("level1", "level2", "level3a", "level3b")


class PromptSet(nn.Module):
    """Trainable prompt tensors, one per enabled level.

    level1 / level2 / level3a live at the full BEV grid, level3b at half
    resolution. Disabled levels are ``None``.
    """

    def __init__(self, channels, grid: tuple[int, int]):
        super().__init__()
        h, w = grid
        shapes = {
            "level1": (channels.level1, h, w),
            "level2": (channels.level2, h, w),
            "level3a": (channels.level3a, h, w),
            "level3b": (channels.level3b, h // 2, w // 2),
        }
        self.grid = (h, w)
        for level, shape in shapes.items():
            if shape[0] > 0:
                self.register_parameter(level, nn.Parameter(torch.zeros(shape)))
            else:
                setattr(self, level, None)

    def channels(self, level: str) -> int:
        p = getattr(self, level)
        return 0 if p is None else p.shape[0]

    def enabled_levels(self) -> list[str]:
        return [lv for lv in LEVELS if getattr(self, lv) is not None]

    def reset_(self, seed: int, prefix: str = "prompt", levels=None) -> "PromptSet":
        """Draw enabled (or the listed) levels from seeded U(-0.01, 0.01)."""
        with torch.no_grad():
            for lv in levels or self.enabled_levels():
                p = getattr(self, lv)
                if p is not None:
                    p.copy_(seeded_uniform(tuple(p.shape), PROMPT_INIT_BOUND, seed, f"{prefix}.{lv}"))
        return self

    def zero_(self) -> "PromptSet":
        with torch.no_grad():
            for lv in self.enabled_levels():
                getattr(self, lv).zero_()
        return self


def init_prompts(cfg: ModelConfig, seed: int) -> PromptSet:
    return PromptSet(cfg.prompts, cfg.grid).reset_(seed)


def _concat_prompt(f: FeatureMap, prompt: torch.Tensor, where: str) -> FeatureMap:
    if prompt.shape[-2:] != (f.height, f.width):
        raise DimensionError(
            f"{where}: prompt is {prompt.shape[-2]}x{prompt.shape[-1]}, feature map is {f.height}x{f.width}")
    x = f.batched()
    p = prompt.to(x.dtype).unsqueeze(0).expand(x.shape[0], *prompt.shape)
    return f.like(torch.cat([x, p], dim=1))


def attach_level1(f_bev: FeatureMap, prompts: PromptSet) -> FeatureMap:
    if prompts.level1 is None:
        return f_bev
    return _concat_prompt(f_bev, prompts.level1, "level1")


class ChannelAlign(nn.Module):
    """1x1 conv mapping ``C + C_p`` channels back to ``C``.

    Starts as ``[I | 0]`` so attaching the prompt is a no-op at step 0.
    """

    def __init__(self, channels: int, prompt_channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels + prompt_channels, channels, 1)
        self.identity_()

    def identity_(self) -> "ChannelAlign":
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, : self.channels, 0, 0] = torch.eye(self.channels)
            self.conv.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


def concat_level2(f_fused: FeatureMap, prompts: PromptSet) -> FeatureMap:
    if prompts.level2 is None:
        return f_fused
    return _concat_prompt(f_fused, prompts.level2, "level2")


def attach_level2_align(f_fused: FeatureMap, prompts: PromptSet, align: ChannelAlign | None) -> FeatureMap:
    if prompts.level2 is None:
        return f_fused
    if align is None:
        raise ConfigError("level2 prompts need a channel-align layer")
    cat = concat_level2(f_fused, prompts)
    if align.conv.in_channels != cat.channels or align.conv.out_channels != f_fused.channels:
        raise ConfigError(
            f"align maps {align.conv.in_channels}->{align.conv.out_channels}, "
            f"needs {cat.channels}->{f_fused.channels}")
    return f_fused.like(align(cat.batched()))


def attach_level3(f_i: FeatureMap, prompts: PromptSet, scale_index: int) -> FeatureMap:
    if scale_index not in (1, 2):
        raise DimensionError(f"level3 scale_index must be 1 or 2, got {scale_index}")
    p = prompts.level3a if scale_index == 1 else prompts.level3b
    if p is None:
        return f_i
    return _concat_prompt(f_i, p, f"level3 scale {scale_index}")


# ---------------------------------------------------------------------------
# trainability

# top-level module name -> role in the freeze contract
PARAM_GROUPS = {
    "image_fm": "stub",
    "point_fm": "stub",
    "backbone": "camera",
    "fpn": "camera",
    "to_bev": "camera",
    "point_compress": "camera",
    "point_upsample": "camera",
    "lidar_encoder": "lidar",
    "prompt": "post",
    "fusion": "post",
    "align": "post",
    "bev_backbone": "post",
    "bev_fpn": "post",
    "head": "post",
}

REGIMES = {
    "full": {"camera", "lidar", "post"},
    "prompt": {"post"},
    "lidar": {"lidar", "post"},
}


@dataclass(frozen=True)
class TrainabilitySpec:
    trainable_names: frozenset
    frozen_names: frozenset
    regime: str

    def is_trainable(self, name: str) -> bool:
        return name in self.trainable_names


def param_group(name: str) -> str:
    top = name.split(".", 1)[0]
    try:
        return PARAM_GROUPS[top]
    except KeyError:
        raise RegistryError(f"parameter {name!r} has no group in the freeze contract") from None


def default_regime(cfg: ModelConfig) -> str:
    return "prompt" if cfg.uses_prompts else "full"


def build_trainability(model: nn.Module, regime: str | None = None) -> TrainabilitySpec:
    """Partition every parameter of ``model`` into trainable and frozen.

    ``prompt``: only layers after the BEV features (prompts, fusion encoder,
    align conv, BEV backbone, BEV FPN, head) train. ``full``: everything but
    the foundation stubs. ``lidar``: the LiDAR encoder plus the post-BEV
    layers.
    """
    regime = regime or default_regime(model.config)
    if regime not in REGIMES:
        raise ConfigError(f"unknown trainability regime {regime!r}")
    allowed = REGIMES[regime]
    trainable, frozen = set(), set()
    for name, _ in model.named_parameters():
        (trainable if param_group(name) in allowed else frozen).add(name)
    return TrainabilitySpec(frozenset(trainable), frozenset(frozen), regime)


def apply_trainability(model: nn.Module, spec: TrainabilitySpec) -> None:
    names = {n for n, _ in model.named_parameters()}
    if names != spec.trainable_names | spec.frozen_names or spec.trainable_names & spec.frozen_names:
        raise RegistryError("trainability spec does not partition the model's parameters")
    for name, p in model.named_parameters():
        p.requires_grad_(name in spec.trainable_names)


def count_scalars(model: nn.Module, names=None) -> int:
    return sum(p.numel() for n, p in model.named_parameters() if names is None or n in names)
