"""The assembled detector: image backbone and foundation branch, BEV
conversion, prompted fusion chain and dense head, plus its loss and the
checkpoint loading rules used between training stages."""
from __future__ import annotations

import contextlib
import math
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .bev import BEVBackbone, BEVConverter, DenseHead, DetectionBox, FusionEncoder, LidarEncoder
from .bev import FUSION_KERNELS, detect_head, heatmap_bias
from .checkpoint import load_archive, save_archive
from .config import ModelConfig
from .core import FPN, FeatureMap, ImageBackbone, Role, init_weight
from .errors import CheckpointError, StageError
from .foundation import ChannelCompressor, ImageFoundationStub, PointFoundationStub, PointUpsampler
from .prompts import ChannelAlign, PromptSet, attach_level1, attach_level3, concat_level2

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
REG_WEIGHT = 1.0
TARGET_RADIUS = 1
HEAD_INIT_SCALE = 0.01
# fixed input normalisation (the LiDAR planes are sparse, hence the gain)
CAMERA_MEAN = 0.5
CAMERA_STD = 0.25
LIDAR_SCALE = 4.0
TARGET_SIGMA = 0.75

# names that a checkpoint may lack when loaded into a wider config
NEW_CAPABLE = ("prompt.", "align.", "image_fm.", "point_fm.", "point_compress.", "point_upsample.")


_RELU_FOLLOWED = ("backbone.stage*.conv1", "image_fm.", "point_upsample.", "lidar_encoder.", "fusion.",
                  "bev_backbone.", "head.shared")
_RESIDUAL_HALVES = ("backbone.stage*.conv2", "backbone.stage*.proj")


def init_gain(name: str) -> float:
    """Init gain for a weight: sqrt(2) before a ReLU, 1 for linear outputs,
    sqrt(1/2) for each of the two summed residual terms."""
    from fnmatch import fnmatch

    if any(fnmatch(name, pat + "*") for pat in _RESIDUAL_HALVES):
        return math.sqrt(0.5)
    if any(fnmatch(name, pat + "*") for pat in _RELU_FOLLOWED):
        return math.sqrt(2.0)
    return 1.0


def input_blocks(cfg: ModelConfig) -> dict[str, list[tuple[str, int]]]:
    """Input-channel layout of every weight that widens with the config."""
    c = cfg.bev_channels
    n = len(cfg.backbone_channels)
    out = {
        f"fpn.lateral{n}.weight": [("image", cfg.backbone_channels[-1]), ("image_fm", cfg.image_fm_dim)],
        "bev_fpn.lateral1.weight": [("feat", c // 2), ("prompt3a", cfg.prompts.level3a)],
        "bev_fpn.lateral2.weight": [("feat", c), ("prompt3b", cfg.prompts.level3b)],
    }
    fusion = [("bev", c), ("point_fm", cfg.point_fm_channels), ("prompt1", cfg.prompts.level1)]
    for k in FUSION_KERNELS:
        out[f"fusion.branch{k}.weight"] = fusion
    if cfg.prompts.level2:
        out["align.conv.weight"] = [("fused", c), ("prompt2", cfg.prompts.level2)]
    return {name: [(b, s) for b, s in blocks if s > 0] for name, blocks in out.items()}


def _block_slices(blocks) -> dict[str, slice]:
    out, start = {}, 0
    for b, s in blocks:
        out[b] = slice(start, start + s)
        start += s
    return out


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, e) from e


class Detector(nn.Module):
    """Camera + LiDAR BEV detector with optional foundation features and prompts.

    Parameters are registered under canonical dotted names such as
    ``backbone.stage1.conv1.weight`` or ``prompt.level1``; those names are
    the checkpoint contract.
    """

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        super().__init__()
        cfg = self.config = config
        c = cfg.bev_channels
        self.backbone = ImageBackbone(3, cfg.backbone_channels, cfg.backbone_strides)
        fpn_in = list(cfg.backbone_channels)
        fpn_in[-1] += cfg.image_fm_dim
        self.fpn = FPN(fpn_in, cfg.fpn_channels)
        if cfg.image_encoder != "none":
            self.image_fm = ImageFoundationStub(cfg.image_encoder, cfg.foundation_seed)
        if cfg.point_encoder != "none":
            self.point_fm = PointFoundationStub(cfg.point_encoder, cfg.foundation_seed, cfg.lidar_channels)
            self.point_compress = ChannelCompressor(self.point_fm.dim, cfg.point_compress_channels)
            self.point_upsample = PointUpsampler(cfg.point_compress_channels, cfg.grid, cfg.point_upsample_mode)
        self.lidar_encoder = LidarEncoder(cfg.lidar_channels, c // 2)
        self.to_bev = BEVConverter(cfg.fpn_channels, c // 2)
        self.prompt = PromptSet(cfg.prompts, cfg.grid)
        self.fusion = FusionEncoder(c + cfg.point_fm_channels + cfg.prompts.level1, c)
        if cfg.prompts.level2:
            self.align = ChannelAlign(c, cfg.prompts.level2)
        self.bev_backbone = BEVBackbone(c)
        self.bev_fpn = FPN([c // 2 + cfg.prompts.level3a, c + cfg.prompts.level3b], cfg.bev_fpn_channels)
        self.head = DenseHead(cfg.bev_fpn_channels, cfg.head_channels, cfg.num_classes)
        self.seed = seed
        if seed is not None:
            self.reset_parameters(seed)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def reset_parameters(self, seed: int) -> None:
        """Name-keyed seeded init: shared layers start identical across configs."""
        blocks = input_blocks(self.config)
        for name, p in self.named_parameters():
            if name.startswith(("image_fm.", "point_fm.", "prompt.", "align.")):
                continue
            init_weight(p, seed, name, blocks.get(name), init_gain(name))
        self.prompt.reset_(seed)
        if self.config.image_fm_dim:
            # foundation channels start as a no-op, like the prompts
            lateral = self.fpn.laterals()[-1]
            with torch.no_grad():
                lateral.weight[:, self.config.backbone_channels[-1]:].zero_()
        if hasattr(self, "align"):
            self.align.identity_()
        if hasattr(self, "point_upsample"):
            self.point_upsample.zero_last_()
        with torch.no_grad():
            for layer in (self.head.heatmap, self.head.offset, self.head.size, self.head.yaw):
                layer.weight.mul_(HEAD_INIT_SCALE)
            self.head.heatmap.bias.fill_(heatmap_bias())

    # ------------------------------------------------------------------
    def forward(self, camera: torch.Tensor, lidar: torch.Tensor, use_camera: bool = True,
                capture: dict | None = None) -> dict[str, torch.Tensor]:
        """Run the full pipeline on a batch.

        ``use_camera=False`` zeroes the image half of the BEV features (the
        LiDAR-only first training stage). When ``capture`` is a dict it is
        filled with the intermediate tensors by stage name.
        """
        cfg = self.config
        keep = capture if capture is not None else {}
        img = None
        if use_camera:
            with _stage("backbone"):
                feats = self.backbone((camera - CAMERA_MEAN) / CAMERA_STD)
            if cfg.image_encoder != "none":
                with _stage("foundation"):
                    v = self.image_fm(camera)
                    h, w = feats[-1].shape[-2:]
                    feats[-1] = torch.cat([feats[-1], v[:, :, None, None].expand(-1, -1, h, w)], dim=1)
                    keep["backbone_last_concat"] = feats[-1]
            with _stage("fpn"):
                img = self.fpn(feats)
        point_map = None
        if cfg.point_encoder != "none":
            with _stage("point_foundation"):
                pv = self.point_compress(self.point_fm(lidar))
                point_map = self.point_upsample(pv, *cfg.grid)
        with _stage("to_bev"):
            f_bev = self.to_bev(img, self.lidar_encoder(lidar * LIDAR_SCALE), point_map)
        keep["f_bev"] = f_bev
        with _stage("attach_level1"):
            x = attach_level1(FeatureMap(f_bev, Role.BEV), self.prompt).values
        keep["level1"] = x
        with _stage("fuse_bev"):
            fused = self.fusion(x)
        keep["fused"] = fused
        if cfg.prompts.level2:
            with _stage("attach_level2_align"):
                cat = concat_level2(FeatureMap(fused, Role.BEV), self.prompt).values
                keep["level2_concat"] = cat
                fused = self.align(cat)
            keep["aligned"] = fused
        with _stage("bev_backbone"):
            f1, f2 = self.bev_backbone(fused)
        with _stage("attach_level3"):
            f1 = attach_level3(FeatureMap(f1, Role.MS_BEV), self.prompt, 1).values
            f2 = attach_level3(FeatureMap(f2, Role.MS_BEV), self.prompt, 2).values
        keep["level3"] = [f1, f2]
        with _stage("bev_fpn"):
            ms = self.bev_fpn([f1, f2])
        keep["msb"] = ms
        with _stage("head"):
            out = self.head(ms[0])
        return out

    @torch.no_grad()
    def predict(self, camera: torch.Tensor, lidar: torch.Tensor, use_camera: bool = True) -> list[list[DetectionBox]]:
        cfg = self.config
        return detect_head(self(camera, lidar, use_camera=use_camera), cfg.score_floor, cfg.nms_iou,
                           cfg.max_detections)

    # ------------------------------------------------------------------
    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters()}

    def save(self, path: str | Path, extra_meta: dict | None = None) -> Path:
        meta = {"config": self.config.to_dict(), "config_hash": self.config_hash}
        meta.update(extra_meta or {})
        return save_archive(path, self.state_tensors(), meta)


# ---------------------------------------------------------------------------
# loading

def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {n: tuple(p.shape) for n, p in Detector(cfg, seed=None).named_parameters()}


def load_weights(model: Detector, tensors: dict[str, torch.Tensor], src_config: ModelConfig) -> dict[str, set]:
    """Copy ``tensors`` (saved from a ``src_config`` model) into ``model``.

    Widened weights are copied block by block on the input-channel axis;
    blocks the source lacks keep their current values. Parameters the
    source config does not have (prompts, align, foundation layers) keep
    their init. Returns the blocks copied per name (``"*"`` = whole tensor).
    """
    own = dict(model.named_parameters())
    src_names = set(parameter_shapes(src_config))
    unexpected = set(tensors) - set(own)
    missing = {n for n in set(own) - set(tensors) if n in src_names or not n.startswith(NEW_CAPABLE)}
    if unexpected or missing or set(tensors) - src_names:
        raise CheckpointError("checkpoint does not match the parameter registry",
                              missing=missing, unexpected=unexpected | (set(tensors) - src_names))
    dst_blocks, src_blocks = input_blocks(model.config), input_blocks(src_config)
    coverage: dict[str, set] = {}
    with torch.no_grad():
        for name, t in tensors.items():
            p = own[name]
            if name in dst_blocks:
                s_sl, d_sl = _block_slices(src_blocks[name]), _block_slices(dst_blocks[name])
                if t.shape[0] != p.shape[0] or t.shape[2:] != p.shape[2:]:
                    raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(p.shape)}")
                coverage[name] = set()
                for block, sl in d_sl.items():
                    if block in s_sl:
                        p[:, sl] = t[:, s_sl[block]].to(p.dtype)
                        coverage[name].add(block)
            else:
                if t.shape != p.shape:
                    raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(p.shape)}")
                p.copy_(t.to(p.dtype))
                coverage[name] = {"*"}
    return coverage


def load_checkpoint(model: Detector, path: str | Path) -> dict:
    tensors, meta = load_archive(path)
    if "config" not in meta:
        raise CheckpointError(f"{path} carries no config metadata")
    load_weights(model, tensors, ModelConfig.from_dict(meta["config"]))
    return meta


def model_from_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    tensors, meta = load_archive(path)
    if "config" not in meta:
        raise CheckpointError(f"{path} carries no config metadata")
    cfg = ModelConfig.from_dict(meta["config"])
    model = Detector(cfg, seed=0)
    load_weights(model, tensors, cfg)
    return model, meta


def merge_runs(model: Detector, runs: Sequence[tuple[dict, ModelConfig]]) -> dict[str, int]:
    """Integrate stage-2 runs into ``model``, in increasing priority.

    Every parameter, and every input-channel block of a widened weight, is
    taken from the last run that has it. Blocks no run has keep the model's
    own values. Returns ``{"name:block": run index}`` (block ``*`` = whole tensor).
    """
    source: dict[str, int] = {}
    for i, (tensors, cfg) in enumerate(runs):
        cov = load_weights(model, tensors, cfg)
        for name, got in cov.items():
            for block in got:
                source[f"{name}:{block}"] = i
    return source


# ---------------------------------------------------------------------------
# training targets and loss

def build_targets(boxes: Sequence[Sequence[DetectionBox]], num_classes: int, grid: tuple[int, int],
                  radius: int = TARGET_RADIUS):
    """Soft centre heatmap plus regression targets around each centre cell.

    The centre cell gets heat 1 and cells within ``radius`` (Chebyshev) get
    a Gaussian falloff. Regression targets are set on all of those cells,
    each relative to its own cell, and weighted by the same falloff.

    Returns ``(heat, index, reg, weight)``: ``index`` is ``(N, 3)`` long
    (batch, row, col), ``reg`` ``(N, 6)`` holds offset x/y, log size x/y and
    sin/cos yaw, ``weight`` is ``(N,)``.
    """
    h, w = grid
    heat = torch.zeros(len(boxes), num_classes, h, w)
    index, reg, weight = [], [], []
    for b, sample in enumerate(boxes):
        for box in sample:
            col = min(max(int(math.floor(box.center_x)), 0), w - 1)
            row = min(max(int(math.floor(box.center_y)), 0), h - 1)
            for r in range(max(0, row - radius), min(h, row + radius + 1)):
                for c in range(max(0, col - radius), min(w, col + radius + 1)):
                    g = 1.0 if (r, c) == (row, col) else math.exp(
                        -((c + 0.5 - box.center_x) ** 2 + (r + 0.5 - box.center_y) ** 2) / (2 * TARGET_SIGMA ** 2))
                    heat[b, box.class_id, r, c] = max(float(heat[b, box.class_id, r, c]), g)
                    index.append((b, r, c))
                    reg.append((box.center_x - c - 0.5, box.center_y - r - 0.5, math.log(box.size_x),
                                math.log(box.size_y), math.sin(box.yaw), math.cos(box.yaw)))
                    weight.append(g)
    index_t = torch.tensor(index, dtype=torch.long).view(-1, 3)
    reg_t = torch.tensor(reg, dtype=torch.float32).view(-1, 6)
    return heat, index_t, reg_t, torch.tensor(weight, dtype=torch.float32)


def focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    a_t = alpha * target + (1 - alpha) * (1 - target)
    return (a_t * (1 - p_t) ** gamma * ce).sum()


def detection_loss(outputs: dict[str, torch.Tensor], targets) -> dict[str, torch.Tensor]:
    """Focal heatmap loss plus weighted L1 regression, both per object."""
    heat, index, reg, weight = targets
    logits = outputs["heatmap"]
    num_obj = max(1.0, float((heat == 1.0).sum()))
    cls = focal_loss(logits, heat.to(logits.dtype)) / num_obj
    if index.shape[0]:
        b, r, c = index.unbind(1)
        pred = torch.cat([outputs["offset"][b, :, r, c], outputs["log_size"][b, :, r, c],
                          outputs["yaw"][b, :, r, c]], dim=1)
        l1 = ((pred - reg.to(pred.dtype)).abs().sum(1) * weight.to(pred.dtype)).sum() / weight.sum()
    else:
        l1 = logits.sum() * 0.0
    return {"cls": cls, "reg": l1, "total": cls + REG_WEIGHT * l1}


def forward_full(samples, model: Detector, training: bool = False, use_camera: bool = True):
    """Detections for ``samples`` and, when ``training``, the loss terms."""
    from .scenes import collate

    camera, lidar, boxes = collate(samples)
    if training:
        out = model(camera, lidar, use_camera=use_camera)
        losses = detection_loss(out, build_targets(boxes, model.config.num_classes, model.config.grid))
        dets = detect_head({k: v.detach() for k, v in out.items()}, model.config.score_floor,
                           model.config.nms_iou, model.config.max_detections)
        return dets, losses
    with torch.no_grad():
        out = model(camera, lidar, use_camera=use_camera)
    return detect_head(out, model.config.score_floor, model.config.nms_iou, model.config.max_detections), None


def frozen_snapshot(model: nn.Module, names: Iterable[str]) -> dict[str, torch.Tensor]:
    own = dict(model.named_parameters())
    return {n: own[n].detach().clone() for n in names}
