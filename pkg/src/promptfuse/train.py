"""Three-stage training protocol.

Stage 1 trains the LiDAR path and everything after the BEV features with
the camera switched off, always on the plain (no foundation, no prompt)
architecture. Stage 2 starts from that checkpoint: a config with both a
foundation encoder and prompts is trained as two separate runs (foundation
variant with full fine-tuning, prompted variant under the freeze contract);
any other config is one run. Stage 3 integrates the stage-2 runs (the
prompted run wins where both changed a parameter) and continues at the
lower rate.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig, stable_hash
from .errors import ConfigError, NonFiniteLoss
from .metrics import MetricsReport, evaluate
from .core import init_weight
from .model import load_checkpoint
from .model import CAMERA_MEAN, CAMERA_STD, Detector, build_targets, detection_loss, load_weights, merge_runs
from .prompts import apply_trainability, build_trainability, count_scalars, default_regime
from .scenes import SceneSample, SceneSpec, camera_group_mask, collate, dihedral, generate_dataset

log = logging.getLogger(__name__)

LIDAR_ONLY = "lidar_only"
BRANCHES_PARALLEL = "branches_parallel"
JOINT = "joint"
STAGE_MODES = (LIDAR_ONLY, BRANCHES_PARALLEL, JOINT)
# mirror x and/or y; the axis swap would break the road layout
AUGMENTATIONS = 4


@dataclass(frozen=True)
class StageSchedule:
    stage_id: int
    epochs: int
    learning_rate: float
    trainability_mode: str
    load_from: str | None = None

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ConfigError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.trainability_mode not in STAGE_MODES:
            raise ConfigError(f"unknown trainability_mode {self.trainability_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        return cls(**d)


PAPER_SCHEDULE = (
    StageSchedule(1, 20, 1e-4, LIDAR_ONLY),
    StageSchedule(2, 6, 1e-4, BRANCHES_PARALLEL),
    StageSchedule(3, 6, 1e-5, JOINT),
)

DESK_SCHEDULE = (
    StageSchedule(1, 60, 2e-3, LIDAR_ONLY),
    StageSchedule(2, 40, 1e-3, BRANCHES_PARALLEL),
    StageSchedule(3, 10, 1e-4, JOINT),
)


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 4
    weight_decay: float = 1e-2
    augment: bool = False  # random dihedral flips of each batch
    eval_batch_size: int = 25
    # camera pretraining on a separate, camera-only scene pool
    pretrain_scenes: int = 300
    pretrain_epochs: int = 5
    pretrain_lr: float = 2e-3
    pretrain_batch_size: int = 8
    pretrain_task: str = "camera_group"  # or "objectness"
    pretrain_cast_range: float | None = None  # None: same as the scene spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    stage_id: int
    state: dict[str, torch.Tensor]
    config: ModelConfig
    regime: str
    losses: list[float]
    metrics: MetricsReport | None = None
    trainable_scalars: int = 0
    total_scalars: int = 0


@dataclass
class ProtocolResult:
    model: Detector
    stages: list[StageResult]
    metrics: MetricsReport | None
    wall_seconds: float
    trainable_scalars: int
    total_scalars: int
    extra: dict = field(default_factory=dict)


def _order(n: int, seed: int, stage_id: int, epoch: int, tag: str) -> np.ndarray:
    key = int(stable_hash(tag), 16) % (2 ** 31)
    return np.random.default_rng([seed, stage_id, epoch, key]).permutation(n)


def train_epochs(model: Detector, samples: Sequence[SceneSample], schedule: StageSchedule, regime: str,
                 seed: int, settings: TrainSettings = TrainSettings(), use_camera: bool = True,
                 tag: str = "", max_steps: int | None = None) -> list[float]:
    """Optimise ``model`` in place under ``regime``; returns per-step losses.

    AdamW (decoupled weight decay) with a fixed step size; only trainable
    tensors are handed to the optimiser, so frozen ones never change.
    """
    spec = build_trainability(model, regime)
    apply_trainability(model, spec)
    params = [p for n, p in model.named_parameters() if n in spec.trainable_names]
    opt = torch.optim.AdamW(params, lr=schedule.learning_rate, weight_decay=settings.weight_decay)
    model.train()
    losses, step = [], 0
    for epoch in range(schedule.epochs):
        order = _order(len(samples), seed, schedule.stage_id, epoch, tag)
        for start in range(0, len(order), settings.batch_size):
            idx = order[start:start + settings.batch_size]
            batch = [samples[i] for i in idx]
            if settings.augment:
                flips = _order(AUGMENTATIONS, seed, schedule.stage_id, epoch, f"{tag}/aug/{start}")
                batch = [dihedral(s, int(flips[j % AUGMENTATIONS])) for j, s in enumerate(batch)]
            camera, lidar, boxes = collate(batch)
            out = model(camera, lidar, use_camera=use_camera)
            loss = detection_loss(out, build_targets(boxes, model.config.num_classes, model.config.grid))["total"]
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NonFiniteLoss(schedule.stage_id, step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
            if max_steps is not None and step >= max_steps:
                model.eval()
                return losses
    model.eval()
    return losses


@torch.no_grad()
def predict_dataset(model: Detector, samples: Sequence[SceneSample], batch_size: int = 25,
                    use_camera: bool = True):
    model.eval()
    preds = []
    for start in range(0, len(samples), batch_size):
        camera, lidar, _ = collate(samples[start:start + batch_size])
        preds.extend(model.predict(camera, lidar, use_camera=use_camera))
    return preds


def evaluate_model(model: Detector, samples: Sequence[SceneSample], batch_size: int = 25,
                   use_camera: bool = True, **meta) -> MetricsReport:
    if not samples:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds = predict_dataset(model, samples, batch_size, use_camera)
    return evaluate(preds, [s.boxes for s in samples], model.config.grid, model.config.num_classes,
                    config_hash=model.config_hash, **meta)


CAMERA_PREFIXES = ("backbone.", "fpn.", "to_bev.")


def pretrain_camera(cfg: ModelConfig, scene_spec: SceneSpec, seed: int,
                    settings: TrainSettings = TrainSettings()) -> dict[str, torch.Tensor]:
    """Camera-to-BEV pretraining, the stand-in for a segmentation-pretrained
    image backbone.

    Backbone, FPN and the BEV image projection learn per-cell camera-group
    segmentation on ``settings.pretrain_scenes`` scenes from the dedicated
    ``pretrain`` split, which never overlaps train or val. Only the camera
    tensors are returned; the segmentation head is thrown away.
    """
    base = cfg.baseline()
    model = Detector(base, seed)
    pool_spec = scene_spec
    if settings.pretrain_cast_range is not None:
        pool_spec = dataclasses.replace(scene_spec, cast_range=settings.pretrain_cast_range)
    data = generate_dataset(pool_spec, settings.pretrain_scenes, "pretrain")
    labels = torch.from_numpy(np.stack([camera_group_mask(scene_spec, s.boxes) for s in data]))
    if settings.pretrain_task == "objectness":
        labels = (labels > 0).long()
    elif settings.pretrain_task != "camera_group":
        raise ConfigError(f"unknown pretrain_task {settings.pretrain_task!r}")
    half = base.bev_channels // 2
    n_classes = 2 if settings.pretrain_task == "objectness" else 1 + scene_spec.camera_groups
    head = nn.Conv2d(half, n_classes, 1)
    init_weight(head.weight, seed, "pretrain_head.weight", gain=1.0)
    nn.init.zeros_(head.bias)
    params = [p for n, p in model.named_parameters() if n.startswith(CAMERA_PREFIXES)] + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=settings.pretrain_lr, weight_decay=settings.weight_decay)
    bs = settings.pretrain_batch_size
    for epoch in range(settings.pretrain_epochs):
        order = _order(len(data), seed, 0, epoch, "pretrain")
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            camera = torch.stack([data[i].camera for i in idx])
            feats = model.fpn(model.backbone((camera - CAMERA_MEAN) / CAMERA_STD))
            grid_zeros = camera.new_zeros(len(idx), half, *base.grid)
            img = model.to_bev(feats, grid_zeros)[:, :half]
            loss = F.cross_entropy(head(F.relu(img)), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return {n: p.detach().clone() for n, p in model.named_parameters() if n.startswith(CAMERA_PREFIXES)}


def _snapshot(model: Detector) -> dict[str, torch.Tensor]:
    return model.state_tensors()


def stage_plan(cfg: ModelConfig, reload: bool = False) -> list[tuple[ModelConfig, str]]:
    """Stage-2 runs for ``cfg`` as (variant config, trainability regime)."""
    if reload:
        if not cfg.prompts.level2:
            raise ConfigError("the reloaded protocol needs level2 prompts")
        return [(cfg.replace(prompts=(cfg.prompts.level1, 0, cfg.prompts.level3a, cfg.prompts.level3b)), "prompt")]
    if cfg.uses_foundation and cfg.uses_prompts:
        return [(cfg.without_prompts(), "full"), (cfg.without_foundation(), "prompt")]
    return [(cfg, default_regime(cfg))]


class StageCache:
    """In-memory memo of finished stage runs, keyed by everything that
    determines them. Lets an ablation share stage 1 (and identical stage-2
    runs) between rows without changing any result."""

    def __init__(self):
        self._store: dict[str, tuple[dict, list[float]]] = {}

    def get(self, key):
        hit = self._store.get(key)
        return None if hit is None else ({k: v.clone() for k, v in hit[0].items()}, list(hit[1]))

    def put(self, key, state, losses):
        self._store[key] = ({k: v.clone() for k, v in state.items()}, list(losses))


def _run_key(*parts) -> str:
    return stable_hash([p if isinstance(p, (str, int, float, list, dict)) or p is None else str(p) for p in parts], 32)


def run_protocol(cfg: ModelConfig, train: Sequence[SceneSample], val: Sequence[SceneSample] | None,
                 seed: int, schedules: Sequence[StageSchedule] = DESK_SCHEDULE,
                 settings: TrainSettings = TrainSettings(), scene_spec: SceneSpec | None = None,
                 reload: bool = False, cache: StageCache | None = None, out_dir: str | Path | None = None,
                 eval_every_stage: bool = False, resume: str | Path | None = None) -> ProtocolResult:
    """Run the protocol for ``cfg`` and evaluate the final model on ``val``.

    ``scene_spec`` enables camera pretraining (skipped when ``None`` or when
    ``settings.pretrain_scenes`` is 0). With ``out_dir`` every stage writes
    ``stageN.ckpt`` and, when evaluated, ``stageN.metrics.json``. ``resume``
    names a stage-2 checkpoint and runs only stage 3 from it.
    """
    t0 = time.perf_counter()
    s1, s2, s3 = sorted(schedules, key=lambda s: s.stage_id)
    data_key = stable_hash([s.sample_id for s in train])
    out = Path(out_dir) if out_dir else None
    results: list[StageResult] = []

    def finish(stage_id, model, regime, losses, variant, use_camera=True):
        metrics = None
        if val and (eval_every_stage or stage_id == 3):
            metrics = evaluate_model(model, val, settings.eval_batch_size, use_camera=use_camera,
                                     seed=seed, stage_id=stage_id)
        spec = build_trainability(model, regime)
        res = StageResult(stage_id, _snapshot(model), variant, regime, losses, metrics,
                          count_scalars(model, spec.trainable_names), count_scalars(model))
        results.append(res)
        if out is not None:
            model.save(out / f"stage{stage_id}.ckpt", {"stage_id": stage_id, "seed": seed, "regime": regime})
            if metrics is not None:
                (out / f"stage{stage_id}.metrics.json").write_text(
                    json.dumps(metrics.to_dict(), sort_keys=True, indent=1) + "\n")
        return res

    if resume is not None:
        merged = Detector(cfg, seed)
        load_checkpoint(merged, resume)
    else:
        merged = _stages_one_two(cfg, train, seed, s1, s2, settings, scene_spec, reload, cache, data_key, finish)

    regime3 = default_regime(cfg)
    losses3 = train_epochs(merged, train, s3, regime3, seed, settings, tag="s3")
    r3 = finish(3, merged, regime3, losses3, cfg)
    return ProtocolResult(merged, results, r3.metrics, time.perf_counter() - t0,
                          r3.trainable_scalars, r3.total_scalars)


def _cached_run(cache, key, model, cfg, fn):
    hit = cache.get(key) if cache else None
    if hit:
        load_weights(model, hit[0], cfg)
        return hit[1]
    losses = fn()
    if cache:
        cache.put(key, model.state_tensors(), losses)
    return losses


def _stages_one_two(cfg, train, seed, s1, s2, settings, scene_spec, reload, cache, data_key, finish) -> Detector:
    base_cfg = cfg.baseline()
    m1 = Detector(base_cfg, seed)
    pre_key = None
    if scene_spec is not None and settings.pretrain_scenes > 0:
        pre_key = _run_key("s0", base_cfg.to_dict(), seed, scene_spec.to_dict(), settings.to_dict())

        def pretrain():
            own = dict(m1.named_parameters())
            tensors = pretrain_camera(base_cfg, scene_spec, seed, settings)
            with torch.no_grad():
                for name, t in tensors.items():
                    own[name].copy_(t)
            return []

        _cached_run(cache, pre_key, m1, base_cfg, pretrain)

    # stage 1: plain architecture, LiDAR only
    k1 = _run_key("s1", base_cfg.to_dict(), seed, s1.to_dict(), data_key, settings.to_dict(), pre_key)
    losses1 = _cached_run(cache, k1, m1, base_cfg,
                          lambda: train_epochs(m1, train, s1, "lidar", seed, settings, use_camera=False, tag="s1"))
    r1 = finish(1, m1, "lidar", losses1, base_cfg, use_camera=False)

    # stage 2: one or two runs starting from the stage-1 weights
    runs = []
    for variant, regime in stage_plan(cfg, reload):
        m2 = Detector(variant, seed)
        load_weights(m2, r1.state, base_cfg)
        k2 = _run_key("s2", k1, variant.to_dict(), regime, s2.to_dict())
        losses2 = _cached_run(cache, k2, m2, variant, lambda: train_epochs(
            m2, train, s2, regime, seed, settings, tag="s2"))
        runs.append((m2, variant, regime, losses2))

    merged = Detector(cfg, seed)
    if len(runs) == 1:
        m2, variant, regime, losses2 = runs[0]
        finish(2, m2, regime, losses2, variant)
        load_weights(merged, m2.state_tensors(), variant)
    else:
        merge_runs(merged, [(m.state_tensors(), v) for m, v, _, _ in runs])
        finish(2, merged, default_regime(cfg), [x for r in runs for x in r[3]], cfg)
    return merged
