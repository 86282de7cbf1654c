"""End-to-end acceptance checks, one test per criterion.

Every test prints a ``[acceptance N] PASS|FAIL ...`` line (visible without
``-s``) before asserting, so a full run doubles as a report. Criteria 6 and 7
train many models and take most of the runtime.
"""
from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from promptfuse.ablation import AblationEntry, desk_sweep, rows_to_csv, run_ablation
from promptfuse.cli import main as cli_main
from promptfuse.config import MODES, desk_config, mode_config, paper_config
from promptfuse.metrics import compute_map
from promptfuse.model import Detector, build_targets, detection_loss, load_weights
from promptfuse.prompts import build_trainability, count_scalars
from promptfuse.scenes import SceneSpec, collate, generate_dataset
from promptfuse.train import DESK_SCHEDULE, StageSchedule, TrainSettings, train_epochs
from test_metrics import _random_instance, brute_force_map

SEEDS = (0, 1, 2, 3, 4)


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    assert ok, detail


@pytest.fixture(scope="module")
def benchmark():
    spec = SceneSpec()
    return spec, generate_dataset(spec, 600, "train"), generate_dataset(spec, 150, "val")


# 1 ---------------------------------------------------------------------------
def test_criterion1_paper_shape_ledger(capsys):
    t0 = time.perf_counter()
    cfg = paper_config(prompts=(100, 150, 0, 0))
    two = {}
    with torch.no_grad():
        Detector(cfg, 0)(torch.rand(1, 3, *cfg.image_size), torch.rand(1, 3, *cfg.grid), capture=two)
    channels = [two["level1"].shape[1], two["fused"].shape[1], two["level2_concat"].shape[1],
                two["aligned"].shape[1]]
    cfg4 = paper_config(prompts=(50, 25, 12, 25))
    cap4 = {}
    with torch.no_grad():
        Detector(cfg4, 0)(torch.rand(1, 3, *cfg4.image_size), torch.rand(1, 3, *cfg4.grid), capture=cap4)
    l3 = [tuple(t.shape[1:]) for t in cap4["level3"]]
    elapsed = time.perf_counter() - t0
    ok = (channels == [356, 256, 406, 256] and tuple(two["level1"].shape[-2:]) == (180, 180)
          and l3 == [(140, 180, 180), (281, 90, 90)] and elapsed <= 60)
    verdict(capsys, 1, ok, f"channels {channels} level3 {l3} in {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------
def test_criterion2_freeze_isolation(capsys, benchmark):
    _, train, _ = benchmark
    model = Detector(mode_config("pf3det"), 0)
    spec = build_trainability(model, "prompt")
    before = model.state_tensors()
    losses = train_epochs(model, train[:40], StageSchedule(3, 10, 1e-3, "joint"), "prompt", 0,
                          TrainSettings(batch_size=4), max_steps=50)
    after = model.state_tensors()
    frozen_same = all(torch.equal(before[n], after[n]) for n in spec.frozen_names)
    moved = float((after["prompt.level1"] - before["prompt.level1"]).norm())
    ok = len(losses) == 50 and frozen_same and moved > 0
    verdict(capsys, 2, ok, f"{len(losses)} steps, {len(spec.frozen_names)} frozen tensors unchanged={frozen_same}, "
                          f"level-1 prompt moved {moved:.3g}")


# 3 ---------------------------------------------------------------------------
def _tiny_fd_setup():
    cfg = desk_config(image_size=(32, 32), backbone_channels=(4, 6), backbone_strides=(2, 2), fpn_channels=4,
                      bev_channels=4, grid=(12, 12), bev_fpn_channels=4, head_channels=4,
                      prompts=(2, 4, 0, 0))
    spec = SceneSpec(grid=(12, 12), image_size=(32, 32), objects_per_scene=(2, 3))
    samples = generate_dataset(spec, 2, "train")
    model = Detector(cfg, 0).double()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in (model.prompt.level1, model.prompt.level2, model.align.conv.weight):
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    camera, lidar, boxes = collate(samples)
    targets = build_targets(boxes, cfg.num_classes, cfg.grid)
    camera, lidar = camera.double(), lidar.double()

    def loss_fn():
        return detection_loss(model(camera, lidar), targets)["total"]

    return model, loss_fn


def test_criterion3_gradient_finite_differences(capsys):
    t0 = time.perf_counter()
    model, loss_fn = _tiny_fd_setup()
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(0)
    picks = []
    for name, tensor, k in (("prompt.level1", model.prompt.level1, 16), ("prompt.level2", model.prompt.level2, 16),
                            ("align.conv.weight", model.align.conv.weight, 32)):
        for flat in rng.choice(tensor.numel(), size=k, replace=False):
            picks.append((name, tensor, int(flat)))
    worst, h = 0.0, 1e-4
    with torch.no_grad():
        for name, tensor, flat in picks:
            view = tensor.view(-1)
            analytic = float(tensor.grad.view(-1)[flat])
            orig = float(view[flat])
            view[flat] = orig + h
            up = float(loss_fn())
            view[flat] = orig - h
            down = float(loss_fn())
            view[flat] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric))
            if scale > 1e-10:
                worst = max(worst, abs(analytic - numeric) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed <= 120
    verdict(capsys, 3, ok, f"{len(picks)} entries, worst relative error {worst:.2e} in {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------
def test_criterion4_safe_start(capsys, benchmark):
    _, _, val = benchmark
    camera, lidar, _ = collate(val[:4])
    base = Detector(desk_config(), 0)
    prompted = Detector(mode_config("prompt_only"), 7)
    load_weights(prompted, base.state_tensors(), base.config)
    prompted.prompt.zero_()
    prompted.align.identity_()
    with torch.no_grad():
        a, b = base(camera, lidar), prompted(camera, lidar)
    diff = max(float((a[k] - b[k]).abs().max()) for k in a)
    verdict(capsys, 4, diff <= 1e-6, f"max-abs output difference {diff:.2e}")


# 5 ---------------------------------------------------------------------------
def test_criterion5_map_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        preds, gts = _random_instance(rng)
        worst = max(worst, abs(compute_map(preds, gts)["map"] - brute_force_map(preds, gts)))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 5, worst <= 1e-9 and elapsed <= 60, f"200 instances, worst |diff| {worst:.1e} in {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------
def test_criterion6_mode_ordering(capsys, benchmark):
    spec, train, val = benchmark
    t0 = time.perf_counter()
    rows = run_ablation([AblationEntry(m, mode_config(m)) for m in MODES], SEEDS, train, val, 0.05,
                        DESK_SCHEDULE, TrainSettings(), spec)
    m = {r.config_id: r.map_mean for r in rows}
    elapsed = time.perf_counter() - t0
    ok = (m["pf3det"] >= m["prompt_only"] >= m["baseline"] and m["pf3det"] >= m["fm_only"] >= m["baseline"]
          and m["pf3det"] - m["baseline"] >= 0.02 and elapsed <= 3600)
    table = " ".join(f"{k}={v:.4f}" for k, v in m.items())
    verdict(capsys, 6, ok, f"mean mAP over {len(SEEDS)} seeds: {table}; "
                          f"pf3det-baseline {m['pf3det'] - m['baseline']:+.4f} in {elapsed / 60:.1f} min")


# 7 ---------------------------------------------------------------------------
def test_criterion7_prompt_width_saturates(capsys, benchmark):
    spec, train, val = benchmark
    rows = run_ablation(desk_sweep(), SEEDS, train, val, 0.05, DESK_SCHEDULE, TrainSettings(), spec)
    means = [r.map_mean for r in rows]
    best = max(means)
    largest_strictly_best = means[-1] == best and sum(v == best for v in means) == 1
    ok = not largest_strictly_best and means[0] < best
    table = " ".join(f"{r.config_id}={r.map_mean:.4f}" for r in rows)
    verdict(capsys, 7, ok, f"sweep over {len(SEEDS)} seeds: {table}")


# 8 ---------------------------------------------------------------------------
def test_criterion8_cmd_train_determinism(capsys, tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen", "--out", str(data), "--fraction", "0.05"]) == 0
    runs = []
    for name in ("a", "b"):
        assert cli_main(["train", "--data", str(data), "--mode", "pf3det", "--out", str(tmp_path / name)]) == 0
        runs.append(((tmp_path / name / "stage3.ckpt").read_bytes(),
                     (tmp_path / name / "stage3.metrics.json").read_bytes()))
    ok = runs[0] == runs[1]
    verdict(capsys, 8, ok, f"stage-3 checkpoint ({len(runs[0][0])} bytes) and metrics identical={ok}")


# 9 ---------------------------------------------------------------------------
def test_criterion9_trainable_share(capsys):
    shares = {}
    for mode in ("prompt_only", "pf3det"):
        model = Detector(mode_config(mode), 0)
        trainable = count_scalars(model, build_trainability(model, "prompt").trainable_names)
        shares[mode] = (trainable, count_scalars(model))
    header = rows_to_csv([]).splitlines()[0].split(",")
    ok = all(t / n < 0.35 for t, n in shares.values()) and "trainable_param_count" in header
    detail = " ".join(f"{k} {t}/{n}={t / n:.1%}" for k, (t, n) in shares.items())
    verdict(capsys, 9, ok, detail)
