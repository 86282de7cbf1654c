"""Synthetic paired camera / LiDAR scenes and the limited-data sampler.

Every scene is a pure function of ``(spec, split, index)``. The pseudo
camera is a top-down colour image aligned with the BEV grid; the pseudo
LiDAR is three BEV planes (occupancy, height, intensity).

Class identity is split between modalities: each class has a LiDAR group
(size, height, reflectivity) and a camera group (colour), and only the pair
identifies the class. ``camera_fraction`` sets how much of that identity
lives in the camera alone: 1.0 leaves LiDAR with no class information, 0.0
leaves the camera with none.

Scene-level effects make context and position matter. A random colour
cast is added to the whole image, so an object's colour is only readable
relative to the scene's overall tint. Objects follow a layout prior: even
camera groups mostly sit on a road band running through the ego position,
odd ones mostly beside it. The sensor's own vehicle shows up at the grid
centre in both modalities but is never a labelled object, and LiDAR
returns thin out with range from the centre.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .bev import DetectionBox
from .config import stable_hash
from .errors import ConfigError
from .geometry import wrap_angle

SPLITS = ("train", "val", "pretrain")


@dataclass(frozen=True)
class SceneSpec:
    grid: tuple[int, int] = (36, 36)
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    objects_per_scene: tuple[int, int] = (1, 6)
    camera_fraction: float = 0.5
    camera_noise: float = 0.04
    lidar_noise: float = 0.03
    clutter_rate: float = 0.01
    color_amplitude: float = 0.2
    cast_range: float = 0.35
    texture_amplitude: float = 0.25
    range_falloff: float = 20.0
    min_keep: float = 0.2
    ego_artifact: bool = True
    road_prior: float = 0.85
    road_half_width: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not 0.0 <= self.camera_fraction <= 1.0:
            raise ConfigError("camera_fraction must lie in [0, 1]")
        for name in ("camera_noise", "lidar_noise", "clutter_rate", "min_keep", "road_prior"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad objects_per_scene {self.objects_per_scene}")
        if min(self.grid) < 8 or min(self.image_size) < 8:
            raise ConfigError("grid and image must be at least 8 cells per side")

    @property
    def lidar_groups(self) -> int:
        return max(1, min(self.num_classes, round(self.num_classes ** (1.0 - self.camera_fraction))))

    @property
    def camera_groups(self) -> int:
        return math.ceil(self.num_classes / self.lidar_groups)

    def lidar_group(self, k: int) -> int:
        return k // self.camera_groups

    def camera_group(self, k: int) -> int:
        return k % self.camera_groups

    def on_road(self, k: int) -> bool:
        """Even camera groups belong on the road band through the ego, odd ones beside it."""
        return self.camera_group(k) % 2 == 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kw = dict(d)
        for k in ("grid", "image_size", "objects_per_scene"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass
class SceneSample:
    sample_id: str
    camera: torch.Tensor  # (3, img_h, img_w)
    lidar_bev: torch.Tensor  # (3, H, W)
    boxes: list[DetectionBox]
    split: str = "train"


# ---------------------------------------------------------------------------
# class signatures

def _lidar_signature(spec: SceneSpec, group: int) -> dict:
    t = group / max(1, spec.lidar_groups - 1) if spec.lidar_groups > 1 else 0.0
    return {
        "length": (3.5 + 3.5 * t, 0.55),
        "width": (2.4 + 1.4 * t, 0.3),
        "height": 0.45 + 0.45 * t,
        "reflect": 0.4 + 0.45 * t,
    }


def class_color(spec: SceneSpec, k: int) -> np.ndarray:
    g = spec.camera_group(k)
    theta = 2 * math.pi * g / spec.camera_groups
    phases = np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3])
    return 0.5 + spec.color_amplitude * np.cos(theta + phases)


def _ego_box(spec: SceneSpec) -> tuple[float, float, float, float, float]:
    h, w = spec.grid
    sig = _lidar_signature(spec, spec.lidar_groups - 1)
    return (w / 2, h / 2, sig["length"][0], sig["width"][0], 0.0)


# ---------------------------------------------------------------------------
# rendering helpers

def _inside(px: np.ndarray, py: np.ndarray, box) -> tuple[np.ndarray, np.ndarray]:
    """Mask of points inside the box and their along-heading coordinate."""
    cx, cy, sx, sy, yaw = box
    dx, dy = px - cx, py - cy
    c, s = math.cos(yaw), math.sin(yaw)
    lx = dx * c + dy * s
    ly = -dx * s + dy * c
    return (np.abs(lx) <= sx / 2) & (np.abs(ly) <= sy / 2), lx


def _sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[DetectionBox]:
    h, w = spec.grid
    lo, hi = spec.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    placed: list[tuple[float, float, float]] = []
    if spec.ego_artifact:
        ex, ey, el, ew, _ = _ego_box(spec)
        placed.append((ex, ey, 0.5 * math.hypot(el, ew) + 1.0))
    boxes = []
    for _ in range(n):
        k = int(rng.integers(spec.num_classes))
        sig = _lidar_signature(spec, spec.lidar_group(k))
        zoned = rng.uniform() < spec.road_prior
        for _attempt in range(100):
            length = max(1.0, rng.normal(*sig["length"]))
            width = max(0.8, min(length, rng.normal(*sig["width"])))
            yaw = float(math.pi - rng.uniform(0.0, 2 * math.pi))
            r = 0.5 * math.hypot(length, width)
            cx = float(rng.uniform(r + 0.5, w - r - 0.5))
            cy = float(rng.uniform(r + 0.5, h - r - 0.5))
            if zoned and (abs(cx - w / 2) <= spec.road_half_width) != spec.on_road(k):
                continue
            if all(math.hypot(cx - px, cy - py) > r + pr + 0.5 for px, py, pr in placed):
                placed.append((cx, cy, r))
                boxes.append(DetectionBox(k, cx, cy, float(length), float(width), yaw, 1.0))
                break
    return boxes


def render_scene(spec: SceneSpec, boxes: Sequence[DetectionBox], rng: np.random.Generator,
                 ego_color_class: int = 0) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.grid
    ih, iw = spec.image_size
    # camera: smooth coloured texture + global cast, objects painted on top
    cast = rng.uniform(-spec.cast_range, spec.cast_range, size=3)
    coarse = rng.uniform(-1.0, 1.0, size=(3, 8, 8))
    texture = np.stack([ndimage.zoom(c, (ih / 8, iw / 8), order=1) for c in coarse])
    camera = 0.5 + spec.texture_amplitude * texture
    py, px = np.mgrid[0:ih, 0:iw]
    gx, gy = (px + 0.5) * w / iw, (py + 0.5) * h / ih
    painted = [(b.as_tuple(), class_color(spec, b.class_id)) for b in boxes]
    if spec.ego_artifact:
        painted.append((_ego_box(spec), class_color(spec, ego_color_class)))
    for box, color in painted:
        m, _ = _inside(gx, gy, box)
        camera[:, m] = color[:, None]
    camera = camera + cast[:, None, None] + rng.normal(0.0, spec.camera_noise, size=camera.shape)

    # lidar: supersampled coverage, heading bump, range thinning, clutter
    ss = 3
    sy_, sx_ = np.mgrid[0:h * ss, 0:w * ss]
    qx, qy = (sx_ + 0.5) / ss, (sy_ + 0.5) / ss
    lidar = np.zeros((3, h, w))
    cy_, cx_ = np.mgrid[0:h, 0:w]
    rad = np.hypot(cx_ + 0.5 - w / 2, cy_ + 0.5 - h / 2)
    keep_p = np.clip(np.exp(-rad / spec.range_falloff), spec.min_keep, 1.0)
    rmax = math.hypot(w / 2, h / 2)
    objs = [(b.as_tuple(), spec.lidar_group(b.class_id), False) for b in boxes]
    if spec.ego_artifact:
        objs.append((_ego_box(spec), spec.lidar_groups - 1, True))
    for box, group, is_ego in objs:
        sig = _lidar_signature(spec, group)
        m, lx = _inside(qx, qy, box)
        cover = m.reshape(h, ss, w, ss).mean(axis=(1, 3))
        front = (m & (lx > 0)).reshape(h, ss, w, ss).mean(axis=(1, 3))
        kept = (rng.uniform(size=(h, w)) < (1.0 if is_ego else keep_p)) & (cover > 0)
        occ = np.where(kept, cover, 0.0)
        lidar[0] = np.maximum(lidar[0], occ)
        lidar[1] = np.maximum(lidar[1], np.where(kept, sig["height"] * cover + 0.35 * front, 0.0))
        refl = sig["reflect"] * (1.0 - 0.4 * rad / rmax)
        lidar[2] = np.maximum(lidar[2], np.where(kept, refl * cover, 0.0))
    clutter = (rng.uniform(size=(h, w)) < spec.clutter_rate) & (lidar[0] == 0)
    n_clutter = int(clutter.sum())
    lidar[0][clutter] = rng.uniform(0.3, 1.0, size=n_clutter)
    lidar[1][clutter] = rng.uniform(0.2, 0.9, size=n_clutter)
    lidar[2][clutter] = rng.uniform(0.2, 0.8, size=n_clutter)
    occupied = lidar[0] > 0
    lidar = lidar + np.where(occupied, rng.normal(0.0, spec.lidar_noise, size=lidar.shape), 0.0)
    lidar = np.where(occupied, np.clip(lidar, 0.0, None), 0.0)
    lidar[0] = np.where(occupied, np.maximum(lidar[0], 1e-3), 0.0)
    return camera.astype(np.float32), lidar.astype(np.float32)


def generate_scene(spec: SceneSpec, index: int, split: str = "train") -> SceneSample:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), index])
    boxes = _sample_boxes(spec, rng)
    ego_class = int(rng.integers(spec.num_classes))
    camera, lidar = render_scene(spec, boxes, rng, ego_class)
    return SceneSample(f"{split}-{index:05d}", torch.from_numpy(camera), torch.from_numpy(lidar), boxes, split)


def camera_group_mask(spec: SceneSpec, boxes: Sequence[DetectionBox]) -> np.ndarray:
    """Per-cell label on the BEV grid: 0 background, ``1 + camera group``
    inside an object. Target of the camera pretraining task."""
    h, w = spec.grid
    gy, gx = np.mgrid[0:h, 0:w] + 0.5
    label = np.zeros((h, w), dtype=np.int64)
    for b in boxes:
        m, _ = _inside(gx, gy, b.as_tuple())
        label[m] = 1 + spec.camera_group(b.class_id)
    return label


def generate_dataset(spec: SceneSpec, n_scenes: int, split: str = "train") -> list[SceneSample]:
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    return [generate_scene(spec, i, split) for i in range(n_scenes)]


def sample_count(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))


def subsample_dataset(data: Sequence[SceneSample], fraction: float, seed: int) -> list[SceneSample]:
    """Keep ``round(n * fraction)`` training scenes, uniformly without
    replacement, in their original order. Validation scenes pass through."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    train_idx = [i for i, s in enumerate(data) if s.split == "train"]
    k = sample_count(len(train_idx), fraction)
    if k == 0:
        raise ConfigError(f"fraction {fraction} of {len(train_idx)} training scenes selects nothing")
    if k == len(train_idx):
        return list(data)
    rng = np.random.default_rng(seed)
    chosen = {train_idx[i] for i in rng.choice(len(train_idx), size=k, replace=False)}
    return [s for i, s in enumerate(data) if s.split != "train" or i in chosen]


def dihedral(sample: SceneSample, k: int) -> SceneSample:
    """Apply one of the eight grid symmetries to both sensors and the boxes.

    Bit 0 mirrors x, bit 1 mirrors y, bit 2 swaps the axes (applied last).
    The camera is grid-aligned, so it transforms exactly like the BEV planes.
    """
    if k == 0:
        return sample
    cam, lid = sample.camera, sample.lidar_bev
    h, w = lid.shape[-2:]
    if k & 4 and h != w:
        raise ConfigError("axis swap needs a square grid")
    boxes = []
    for b in sample.boxes:
        x, y, yaw = b.center_x, b.center_y, b.yaw
        if k & 1:
            x, yaw = w - x, math.pi - yaw
        if k & 2:
            y, yaw = h - y, -yaw
        if k & 4:
            x, y, yaw = y, x, math.pi / 2 - yaw
        boxes.append(dataclasses.replace(b, center_x=x, center_y=y, yaw=wrap_angle(yaw)))
    if k & 1:
        cam, lid = cam.flip(-1), lid.flip(-1)
    if k & 2:
        cam, lid = cam.flip(-2), lid.flip(-2)
    if k & 4:
        cam, lid = cam.transpose(-1, -2), lid.transpose(-1, -2)
    return SceneSample(sample.sample_id, cam.contiguous(), lid.contiguous(), boxes, sample.split)


def collate(samples: Sequence[SceneSample]):
    camera = torch.stack([s.camera for s in samples])
    lidar = torch.stack([s.lidar_bev for s in samples])
    return camera, lidar, [s.boxes for s in samples]


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<split>/<id>.camera.npy, <id>.lidar.npy, <id>.json,
# plus <root>/<split>/MANIFEST.json

def write_split(root: str | Path, split: str, samples: Sequence[SceneSample], spec: SceneSpec,
                extra: dict | None = None) -> Path:
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        np.save(d / f"{s.sample_id}.camera.npy", s.camera.numpy().astype("<f4"))
        np.save(d / f"{s.sample_id}.lidar.npy", s.lidar_bev.numpy().astype("<f4"))
        meta = {"sample_id": s.sample_id, "split": s.split, "boxes": [b.to_dict() for b in s.boxes]}
        (d / f"{s.sample_id}.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    manifest = {"split": split, "ids": [s.sample_id for s in samples], "generator_seed": spec.seed,
                "scene_spec": spec.to_dict(), "spec_hash": stable_hash(spec.to_dict())}
    manifest.update(extra or {})
    path = d / "MANIFEST.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def read_split(root: str | Path, split: str) -> list[SceneSample]:
    d = Path(root) / split
    manifest_path = d / "MANIFEST.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no MANIFEST.json under {d}")
    manifest = json.loads(manifest_path.read_text())
    out = []
    for sid in manifest["ids"]:
        meta = json.loads((d / f"{sid}.json").read_text())
        out.append(SceneSample(
            sid,
            torch.from_numpy(np.load(d / f"{sid}.camera.npy")),
            torch.from_numpy(np.load(d / f"{sid}.lidar.npy")),
            [DetectionBox.from_dict(b) for b in meta["boxes"]],
            meta["split"],
        ))
    return out
