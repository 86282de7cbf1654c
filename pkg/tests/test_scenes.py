from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from promptfuse.errors import ConfigError
from promptfuse.geometry import wrap_angle
from promptfuse.scenes import (SceneSpec, camera_group_mask, dihedral, generate_dataset, generate_scene, read_split,
                               sample_count, subsample_dataset, write_split)


def _box_cells(spec, box, shape=None):
    h, w = spec.grid
    rows, cols = shape or spec.grid
    gy, gx = np.mgrid[0:rows, 0:cols] + 0.5
    gx, gy = gx * w / cols, gy * h / rows
    dx, dy = gx - box.center_x, gy - box.center_y
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return (np.abs(dx * c + dy * s) <= box.size_x / 2) & (np.abs(-dx * s + dy * c) <= box.size_y / 2)


def _object_features(spec, scenes):
    """Per object: mean LiDAR planes over its cells, and its mean camera
    colour minus the scene's mean colour."""
    lid, cam, labels = [], [], []
    for s in scenes:
        camera = s.camera.numpy()
        scene_mean = camera.mean(axis=(1, 2))
        for b in s.boxes:
            m = _box_cells(spec, b)
            if not m.any():
                continue
            lid.append(s.lidar_bev.numpy()[:, m].mean(axis=1))
            cam.append(camera[:, _box_cells(spec, b, spec.image_size)].mean(axis=1) - scene_mean)
            labels.append(b.class_id)
    return np.array(lid), np.array(cam), np.array(labels)


def _linear_probe_accuracy(x, y, k, n_fit):
    x = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(x[:n_fit], np.eye(k)[y[:n_fit]], rcond=None)
    return float(np.mean(np.argmax(x[n_fit:] @ w, axis=1) == y[n_fit:]))


def test_generation_is_bitwise_deterministic(spec):
    a, b = generate_dataset(spec, 10), generate_dataset(spec, 10)
    for x, y in zip(a, b):
        assert x.sample_id == y.sample_id and x.boxes == y.boxes
        assert torch.equal(x.camera, y.camera) and torch.equal(x.lidar_bev, y.lidar_bev)


def test_splits_are_distinct(spec):
    assert not torch.equal(generate_scene(spec, 0, "train").camera, generate_scene(spec, 0, "val").camera)
    with pytest.raises(ConfigError):
        generate_scene(spec, 0, "test")


def test_empty_scenes_are_background():
    spec = SceneSpec(objects_per_scene=(0, 0), ego_artifact=False, clutter_rate=0.0)
    for s in generate_dataset(spec, 5):
        assert s.boxes == []
        assert float(s.lidar_bev.abs().sum()) == 0.0


def test_boxes_inside_grid(spec):
    from promptfuse.geometry import box_corners

    h, w = spec.grid
    ids = set()
    for s in generate_dataset(spec, 40):
        ids.add(s.sample_id)
        for b in s.boxes:
            for x, y in box_corners(*b.as_tuple()):
                assert 0 <= x <= w and 0 <= y <= h
    assert len(ids) == 40


@pytest.mark.parametrize("field,value", [("camera_fraction", 1.5), ("num_classes", 1), ("road_prior", -0.1),
                                         ("objects_per_scene", (3, 1))])
def test_spec_validation(field, value):
    with pytest.raises(ConfigError):
        SceneSpec(**{field: value})


def test_lidar_carries_no_class_when_camera_owns_it():
    """Nearest-centroid classifier on LiDAR features sits at chance when
    every class shares one LiDAR signature."""
    spec = SceneSpec(camera_fraction=1.0, road_prior=0.0)
    assert spec.lidar_groups == 1
    lid, _, y = _object_features(spec, generate_dataset(spec, 200))
    half = len(y) // 2
    centroids = np.stack([lid[:half][y[:half] == k].mean(axis=0) for k in range(spec.num_classes)])
    pred = np.argmin(((lid[half:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    acc = float(np.mean(pred == y[half:]))
    assert acc <= 1 / spec.num_classes + 0.05


def test_fusion_is_necessary(spec):
    lid, cam, y = _object_features(spec, generate_dataset(spec, 300))
    n_fit = len(y) // 2
    lidar_only = _linear_probe_accuracy(lid, y, spec.num_classes, n_fit)
    fused = _linear_probe_accuracy(np.hstack([lid, cam]), y, spec.num_classes, n_fit)
    assert fused >= lidar_only + 0.10


def test_sample_count_and_subsample(spec):
    assert sample_count(700, 0.05) == 35
    assert sample_count(600, 0.05) == 30
    data = generate_dataset(spec, 40) + generate_dataset(spec, 5, "val")
    sub = subsample_dataset(data, 0.25, seed=1)
    train_ids = [s.sample_id for s in sub if s.split == "train"]
    assert len(train_ids) == 10 and len(set(train_ids)) == 10
    assert [s.sample_id for s in sub if s.split == "val"] == [s.sample_id for s in data[40:]]
    assert train_ids == sorted(train_ids)
    assert train_ids == [s.sample_id for s in subsample_dataset(data, 0.25, 1) if s.split == "train"]
    assert subsample_dataset(data, 1.0, 5) == data


def test_subsample_seeds_differ(spec):
    data = generate_dataset(spec, 100)
    sets = {tuple(s.sample_id for s in subsample_dataset(data, 0.1, seed)) for seed in range(20)}
    assert len(sets) == 20


@given(st.integers(1, 400), st.floats(0.001, 1.0))
def test_subsample_cardinality_property(n, fraction):
    from promptfuse.scenes import SceneSample

    data = [SceneSample(f"t{i}", torch.zeros(1), torch.zeros(1), []) for i in range(n)]
    k = sample_count(n, fraction)
    if k == 0:
        with pytest.raises(ConfigError):
            subsample_dataset(data, fraction, 0)
        return
    sub = subsample_dataset(data, fraction, 0)
    ids = [s.sample_id for s in sub]
    assert len(ids) == k == len(set(ids)) and set(ids) <= {s.sample_id for s in data}


def test_subsample_rejects_bad_fraction(spec):
    data = generate_dataset(spec, 5)
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            subsample_dataset(data, bad, 0)


@pytest.mark.parametrize("k", range(8))
def test_dihedral_keeps_boxes_on_their_pixels(spec, k):
    """Each transformed box covers the same LiDAR evidence as before, and
    its heading points at the same (transformed) front bump."""
    s = next(x for x in generate_dataset(spec, 10) if len(x.boxes) >= 2)
    t = dihedral(s, k)
    for a, b in zip(s.boxes, t.boxes):
        ma, mb = _box_cells(spec, a), _box_cells(spec, b)
        assert ma.sum() == mb.sum()
        assert float(s.lidar_bev[0].numpy()[ma].sum()) == pytest.approx(float(t.lidar_bev[0].numpy()[mb].sum()),
                                                                         rel=1e-5)
        assert a.size_x == b.size_x and -math.pi < b.yaw <= math.pi
    twice = dihedral(dihedral(s, k & 3), k & 3)
    assert torch.equal(twice.camera, s.camera)
    for a, b in zip(s.boxes, twice.boxes):
        assert b.center_x == pytest.approx(a.center_x) and abs(wrap_angle(b.yaw - a.yaw)) < 1e-9


def test_camera_group_mask(spec):
    s = next(x for x in generate_dataset(spec, 5) if x.boxes)
    mask = camera_group_mask(spec, s.boxes)
    assert mask.shape == spec.grid and mask.max() <= spec.camera_groups
    assert set(np.unique(mask)) - {0} <= {1 + spec.camera_group(b.class_id) for b in s.boxes}


def test_split_round_trip(tmp_path, spec):
    data = generate_dataset(spec, 3)
    write_split(tmp_path, "train", data, spec)
    back = read_split(tmp_path, "train")
    for a, b in zip(data, back):
        assert a.sample_id == b.sample_id and a.boxes == b.boxes
        assert torch.equal(a.camera, b.camera) and torch.equal(a.lidar_bev, b.lidar_bev)
    with pytest.raises(FileNotFoundError):
        read_split(tmp_path, "val")


def test_spec_round_trip(spec):
    other = dataclasses.replace(spec, grid=(20, 20), road_prior=0.3)
    assert SceneSpec.from_dict(other.to_dict()) == other
