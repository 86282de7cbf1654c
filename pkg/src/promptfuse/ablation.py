"""Ablation grids and the runner that aggregates them over seeds.

Channel counts in the grids are written at the nominal BEV width of 256
and scaled by ``C / 256`` for the config they are applied to, so the desk
preset (C=64) runs the same grid at a quarter of the width.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelConfig, PromptChannels, desk_config
from .errors import ConfigError
from .scenes import SceneSample, SceneSpec, subsample_dataset
from .train import DESK_SCHEDULE, StageCache, StageSchedule, TrainSettings, run_protocol

log = logging.getLogger(__name__)

NOMINAL_WIDTH = 256
SINGLE_LEVEL_SWEEP = (10, 50, 100, 150, 200, 500, 1000)
MULTI_LEVEL = ((100, 150), (100, 100), (100, 50))
RELOADED = ((100, 200), (100, 150), (100, 100), (100, 50))
FOUR_LEVEL = ((150, 75, 38, 75), (50, 25, 12, 25))
POINT_CHANNELS = (50, 100)
# desk-width sweep used by the saturation check
DESK_SWEEP = (1, 4, 8, 16, 32)
CSV_COLUMNS = ("config_id", "seed_count", "map_mean", "map_std", "composite_mean", "composite_std",
               "trainable_param_count", "wall_seconds")


@dataclass(frozen=True)
class AblationEntry:
    config_id: str
    config: ModelConfig
    reload: bool = False


@dataclass(frozen=True)
class AblationRow:
    config_id: str
    seed_count: int
    map_mean: float
    map_std: float
    composite_mean: float
    composite_std: float
    trainable_param_count: int
    wall_seconds: float
    total_param_count: int = 0
    maps: tuple[float, ...] = ()

    def csv_values(self) -> list:
        return [self.config_id, self.seed_count, f"{self.map_mean:.6f}", f"{self.map_std:.6f}",
                f"{self.composite_mean:.6f}", f"{self.composite_std:.6f}", self.trainable_param_count,
                f"{self.wall_seconds:.3f}"]


def scaled(channels: int, width: int) -> int:
    """Nominal channel count at BEV width ``width`` (never below 1)."""
    return max(1, round(channels * width / NOMINAL_WIDTH))


def _prompts(base: ModelConfig, levels: Sequence[int]) -> ModelConfig:
    c = base.bev_channels
    vals = [scaled(n, c) for n in levels] + [0] * (4 - len(levels))
    return base.replace(prompts=PromptChannels(*vals))


def table1(base: ModelConfig | None = None) -> list[AblationEntry]:
    base = (base or desk_config()).baseline()
    two = _prompts(base, (100, 150))
    return [
        AblationEntry("baseline", base),
        AblationEntry("fm_resnet50", base.replace(image_encoder="resnet50_stub")),
        AblationEntry("fm_vit_l", base.replace(image_encoder="vit_l_stub")),
        AblationEntry("prompt_1level", _prompts(base, (100,))),
        AblationEntry("prompt_2level", two),
        AblationEntry("fm_vit_l+prompt_2level", two.replace(image_encoder="vit_l_stub")),
    ]


def table2(base: ModelConfig | None = None) -> list[AblationEntry]:
    base = (base or desk_config()).baseline()
    rows = [AblationEntry("image_vit_l", base.replace(image_encoder="vit_l_stub")),
            AblationEntry("image_resnet50", base.replace(image_encoder="resnet50_stub"))]
    for mode in ("repeat", "learned"):
        for ch in POINT_CHANNELS:
            cfg = base.replace(point_encoder="pointbert_stub", point_upsample_mode=mode,
                               point_compress_channels=scaled(ch, base.bev_channels))
            rows.append(AblationEntry(f"point_c{ch}_{mode}", cfg))
    return rows


def table3(base: ModelConfig | None = None, sections: Sequence[str] = ("single", "reloaded", "multi")
           ) -> list[AblationEntry]:
    base = (base or desk_config()).baseline()
    rows = []
    if "single" in sections:
        rows += [AblationEntry(f"single_{n}", _prompts(base, (n,))) for n in SINGLE_LEVEL_SWEEP]
    if "reloaded" in sections:
        rows += [AblationEntry(f"reloaded_{a}_{b}", _prompts(base, (a, b)), reload=True) for a, b in RELOADED]
    if "multi" in sections:
        rows += [AblationEntry(f"multi_{a}_{b}", _prompts(base, (a, b))) for a, b in MULTI_LEVEL]
        rows += [AblationEntry("multi_" + "_".join(map(str, lv)), _prompts(base, lv)) for lv in FOUR_LEVEL]
    return rows


def desk_sweep(base: ModelConfig | None = None, channels: Sequence[int] = DESK_SWEEP) -> list[AblationEntry]:
    """Single-level sweep in raw desk channels (no width scaling)."""
    base = (base or desk_config()).baseline()
    return [AblationEntry(f"single_{n}", base.replace(prompts=PromptChannels(n))) for n in channels]


def table_entries(table: int, base: ModelConfig | None = None) -> list[AblationEntry]:
    grids = {1: table1, 2: table2, 3: table3}
    if table not in grids:
        raise ConfigError(f"unknown table {table}; expected 1, 2 or 3")
    return grids[table](base)


def run_ablation(entries: Sequence[AblationEntry], seeds: Sequence[int], train: Sequence[SceneSample],
                 val: Sequence[SceneSample], fraction: float = 0.05,
                 schedules: Sequence[StageSchedule] = DESK_SCHEDULE, settings: TrainSettings = TrainSettings(),
                 scene_spec: SceneSpec | None = None) -> list[AblationRow]:
    """Train every entry on every seed and aggregate per entry.

    Each seed draws its own ``fraction`` subset of ``train``; all entries in
    a seed see the same subset and share finished stage runs through a
    cache, which changes no result.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    per_entry: dict[str, list] = {e.config_id: [] for e in entries}
    if len(per_entry) != len(entries):
        raise ConfigError("config ids must be unique")
    for seed in seeds:
        subset = subsample_dataset(train, fraction, seed)
        cache = StageCache()
        for e in entries:
            t0 = time.perf_counter()
            res = run_protocol(e.config, subset, val, seed=seed, schedules=schedules, settings=settings,
                               scene_spec=scene_spec, reload=e.reload, cache=cache)
            per_entry[e.config_id].append((res.metrics.map, res.metrics.composite, res.trainable_scalars,
                                           res.total_scalars, time.perf_counter() - t0))
            log.info("seed %d %s map %.4f", seed, e.config_id, res.metrics.map)
    rows = []
    for e in entries:
        runs = per_entry[e.config_id]
        maps = np.array([r[0] for r in runs])
        comps = np.array([r[1] for r in runs])
        rows.append(AblationRow(e.config_id, len(runs), float(maps.mean()), float(maps.std()),
                                float(comps.mean()), float(comps.std()), runs[0][2],
                                float(sum(r[4] for r in runs)), runs[0][3], tuple(float(m) for m in maps)))
    return rows


def rows_to_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_values())
    return buf.getvalue()


def write_csv(path: str | Path, rows: Sequence[AblationRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows))
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_sweep(rows: Sequence[AblationRow], path: str | Path, prefix: str = "single_") -> Path:
    """Line plot of mean mAP (with std bars) against prompt channels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = sorted((int(r.config_id[len(prefix):]), r.map_mean, r.map_std)
                 for r in rows if r.config_id.startswith(prefix))
    if not pts:
        raise ConfigError(f"no rows with prefix {prefix!r} to plot")
    ch, mean, std = zip(*pts)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(ch, mean, yerr=std, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("prompt channels")
    ax.set_ylabel("val mAP")
    ax.set_title("single-level prompt sweep")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "promptfuse"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
