from __future__ import annotations

import pytest
import torch

from promptfuse.config import PromptChannels, desk_config, mode_config, paper_config
from promptfuse.core import FeatureMap, Role
from promptfuse.errors import ConfigError, DimensionError, RegistryError
from promptfuse.model import Detector
from promptfuse.prompts import (ChannelAlign, PromptSet, apply_trainability, attach_level1, attach_level2_align,
                                attach_level3, build_trainability, concat_level2, count_scalars, init_prompts)


def test_paper_prompt_shapes():
    cfg = paper_config(prompts=(100, 150, 0, 0))
    ps = PromptSet(cfg.prompts, cfg.grid)
    assert tuple(ps.level1.shape) == (100, 180, 180)
    assert tuple(ps.level2.shape) == (150, 180, 180)
    assert ps.level3a is None and ps.enabled_levels() == ["level1", "level2"]


def test_desk_prompt_shapes_and_determinism():
    cfg = desk_config(prompts=(8, 12, 0, 0))
    a, b = init_prompts(cfg, 3), init_prompts(cfg, 3)
    assert tuple(a.level1.shape) == (8, 36, 36) and tuple(a.level2.shape) == (12, 36, 36)
    assert torch.equal(a.level1, b.level1) and torch.equal(a.level2, b.level2)
    assert float(a.level1.detach().abs().max()) <= 0.01
    assert not torch.equal(a.level1, init_prompts(cfg, 4).level1)


def test_attach_level1_slices():
    ps = init_prompts(paper_config(prompts=(100, 0, 0, 0), grid=(12, 12)), 0)
    f = FeatureMap(torch.randn(256, 12, 12), Role.BEV)
    out = attach_level1(f, ps)
    assert out.shape == (356, 12, 12)
    assert torch.equal(out.values[:256], f.values) and torch.equal(out.values[256:], ps.level1.detach())
    empty = PromptSet(PromptChannels(), (12, 12))
    assert attach_level1(f, empty) is f
    with pytest.raises(DimensionError):
        attach_level1(FeatureMap(torch.randn(256, 10, 12), Role.BEV), ps)


def test_level2_align_shapes_and_safe_start():
    ps = init_prompts(paper_config(prompts=(0, 150, 0, 0), grid=(10, 10)), 0)
    f = FeatureMap(torch.randn(256, 10, 10), Role.BEV)
    assert concat_level2(f, ps).shape == (406, 10, 10)
    align = ChannelAlign(256, 150)
    out = attach_level2_align(f, ps, align)
    assert out.shape == (256, 10, 10)
    assert torch.equal(out.values, f.values)
    with pytest.raises(ConfigError):
        attach_level2_align(f, ps, ChannelAlign(256, 149))
    with pytest.raises(ConfigError):
        attach_level2_align(f, ps, None)


def test_level3_paper_shapes():
    ps = init_prompts(paper_config(prompts=(50, 25, 12, 25), grid=(20, 20)), 0)
    f1 = FeatureMap(torch.randn(128, 20, 20), Role.MS_BEV)
    f2 = FeatureMap(torch.randn(256, 10, 10), Role.MS_BEV)
    o1, o2 = attach_level3(f1, ps, 1), attach_level3(f2, ps, 2)
    assert o1.shape == (140, 20, 20) and o2.shape == (281, 10, 10)
    assert torch.equal(o1.values[:128], f1.values) and torch.equal(o2.values[256:], ps.level3b.detach())
    with pytest.raises(DimensionError):
        attach_level3(f2, ps, 1)
    with pytest.raises(DimensionError):
        attach_level3(f1, ps, 3)


def _names(model):
    return {n for n, _ in model.named_parameters()}


@pytest.mark.parametrize("mode", ["baseline", "fm_only", "prompt_only", "pf3det"])
def test_trainability_partitions_registry(mode):
    model = Detector(mode_config(mode), 0)
    for regime in ("full", "prompt", "lidar"):
        spec = build_trainability(model, regime)
        assert spec.trainable_names | spec.frozen_names == _names(model)
        assert not spec.trainable_names & spec.frozen_names
        assert not any(n.startswith(("image_fm.", "point_fm.")) for n in spec.trainable_names)


def test_full_registry_with_every_level():
    cfg = desk_config(image_encoder="vit_l_stub", point_encoder="pointbert_stub", prompts=(8, 12, 4, 4))
    model = Detector(cfg, 0)
    spec = build_trainability(model, "prompt")
    assert len(_names(model)) == 96
    assert spec.trainable_names | spec.frozen_names == _names(model)
    assert {n for n in _names(model) if "prompt." in n} <= spec.trainable_names
    assert not any(n.startswith(("backbone.", "fpn.", "to_bev.", "lidar_encoder.", "point_compress."))
                   for n in spec.trainable_names)
    assert "align.conv.weight" in spec.trainable_names and "head.heatmap.weight" in spec.trainable_names


def test_apply_trainability_rejects_foreign_spec():
    a, b = Detector(mode_config("baseline"), 0), Detector(mode_config("pf3det"), 0)
    with pytest.raises(RegistryError):
        apply_trainability(a, build_trainability(b, "prompt"))
    with pytest.raises(ConfigError):
        build_trainability(a, "nope")


def test_trainable_share_below_threshold():
    for mode in ("prompt_only", "pf3det"):
        model = Detector(mode_config(mode), 0)
        spec = build_trainability(model, "prompt")
        assert count_scalars(model, spec.trainable_names) / count_scalars(model) < 0.35


def test_zero_level3_prompts_keep_baseline_behaviour(tiny_val):
    base = Detector(desk_config(), 0)
    cfg = desk_config(prompts=(0, 0, 4, 4))
    prompted = Detector(cfg, 0)
    prompted.prompt.zero_()
    cam = torch.stack([s.camera for s in tiny_val[:2]])
    lid = torch.stack([s.lidar_bev for s in tiny_val[:2]])
    with torch.no_grad():
        a, b = base(cam, lid), prompted(cam, lid)
    for k in a:
        torch.testing.assert_close(a[k], b[k], rtol=0, atol=0)
