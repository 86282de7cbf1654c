from __future__ import annotations

import pytest
import torch

from promptfuse.config import ModelConfig
from promptfuse.core import FeatureMap, Role
from promptfuse.errors import ConfigError, DimensionError
from promptfuse.foundation import (ChannelCompressor, FoundationConfig, FoundationVector, Modality, PointUpsampler,
                                   broadcast_vector, compress_channels, concat_foundation, encode_image_foundation,
                                   encode_point_foundation, upsample_point_features)
from promptfuse.scenes import generate_dataset


@pytest.fixture(scope="module")
def image():
    return FeatureMap(torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0)))


@pytest.mark.parametrize("encoder,dim", [("vit_l_stub", 768), ("resnet50_stub", 1024)])
def test_image_stub_dims_and_determinism(image, encoder, dim):
    cfg = FoundationConfig(image_encoder=encoder)
    a, b = encode_image_foundation(image, cfg), encode_image_foundation(image, cfg)
    assert a.dim == dim and a.modality is Modality.IMAGE
    assert torch.equal(a.values, b.values)
    assert bool(torch.isfinite(a.values).all())


def test_image_stub_disabled():
    with pytest.raises(ConfigError):
        encode_image_foundation(FeatureMap(torch.rand(3, 8, 8)), FoundationConfig())


def test_point_stub(spec):
    cfg = FoundationConfig(point_encoder="pointbert_stub")
    scenes = generate_dataset(spec, 2)
    v = encode_point_foundation(scenes[0].lidar_bev, cfg)
    assert v.dim == 256 and v.modality is Modality.POINT
    assert torch.equal(v.values, encode_point_foundation(scenes[0].lidar_bev, cfg).values)
    with pytest.raises(ConfigError):
        encode_point_foundation(scenes[0].lidar_bev, FoundationConfig())


def test_point_stub_non_degenerate():
    cfg = FoundationConfig(point_encoder="pointbert_stub")
    differ = 0
    for i in range(100):
        g = torch.Generator().manual_seed(i)
        a = (torch.rand(3, 12, 12, generator=g) > 0.7).float()
        b = (torch.rand(3, 12, 12, generator=g) > 0.7).float()
        differ += not torch.equal(encode_point_foundation(a, cfg).values, encode_point_foundation(b, cfg).values)
    assert differ == 100


def test_broadcast_constancy():
    v = FoundationVector(torch.randn(768), Modality.IMAGE, "vit_l_stub")
    m = broadcast_vector(v, 14, 25)
    assert m.shape == (768, 14, 25)
    assert torch.equal(m.values[:, 7, 3], v.values)
    assert float(m.values.var(dim=(-2, -1)).max()) == 0.0
    one = broadcast_vector(v, 1, 1)
    assert torch.equal(one.values.reshape(-1), v.values)
    with pytest.raises(DimensionError):
        broadcast_vector(v, 0, 3)


def test_concat_foundation_slices():
    x = FeatureMap(torch.randn(512, 14, 25))
    vmap = broadcast_vector(torch.randn(768), 14, 25)
    out = concat_foundation(x, vmap)
    assert out.shape == (1280, 14, 25)
    assert torch.equal(out.values[:512], x.values)
    assert torch.equal(out.values[512:], vmap.values)
    assert concat_foundation(x, None) is x
    assert concat_foundation(x, FeatureMap(torch.zeros(0, 14, 25))) is x
    with pytest.raises(DimensionError):
        concat_foundation(x, broadcast_vector(torch.randn(4), 13, 25))


@pytest.mark.parametrize("c_out", [50, 100])
def test_compress_lengths(c_out):
    v = FoundationVector(torch.randn(256), Modality.POINT, "pointbert_stub")
    assert compress_channels(v, ChannelCompressor(256, c_out)).dim == c_out


def test_compress_identity_and_range():
    v = FoundationVector(torch.randn(256), Modality.POINT, "pointbert_stub")
    out = compress_channels(v, ChannelCompressor(256, 256).identity_())
    assert torch.equal(out.values, v.values)
    for bad in (0, 257):
        with pytest.raises(ConfigError):
            ChannelCompressor(256, bad)
    with pytest.raises(ConfigError):
        FoundationConfig(point_encoder="pointbert_stub", point_compress_channels=300)


def test_compress_gradient_finite_differences():
    comp = ChannelCompressor(16, 5).double()
    v = torch.randn(16, dtype=torch.float64)
    w = torch.randn(5, dtype=torch.float64)
    (comp(v) * w).sum().backward()
    g = comp.linear.weight.grad
    for i, j in [(0, 0), (2, 7), (4, 15)]:
        with torch.no_grad():
            old = float(comp.linear.weight[i, j])
            comp.linear.weight[i, j] = old + 1e-6
            up = float((comp(v) * w).sum())
            comp.linear.weight[i, j] = old - 1e-6
            down = float((comp(v) * w).sum())
            comp.linear.weight[i, j] = old
        assert (up - down) / 2e-6 == pytest.approx(float(g[i, j]), rel=1e-3)


def test_repeat_upsample():
    v = FoundationVector(torch.randn(50), Modality.POINT, "pointbert_stub")
    m = upsample_point_features(v, "repeat", 180, 180)
    assert m.shape == (50, 180, 180) and m.role is Role.BEV
    assert float(m.values.var(dim=(-2, -1)).max()) == 0.0


def test_learned_upsample_safe_start_and_shape():
    up = PointUpsampler(16, (36, 36), "learned").zero_last_()
    v = FoundationVector(torch.randn(16), Modality.POINT, "pointbert_stub")
    m = upsample_point_features(v, "learned", 36, 36, up)
    assert m.shape == (16, 36, 36)
    assert bool((m.values == 0).all())
    with pytest.raises(ConfigError):
        up(torch.randn(1, 16), 20, 20)
    with pytest.raises(ConfigError):
        PointUpsampler(4, (1, 8), "learned")


def test_stubs_never_change_during_training(tiny_train):
    from promptfuse.model import Detector
    from promptfuse.train import StageSchedule, TrainSettings, train_epochs

    cfg = ModelConfig(image_encoder="vit_l_stub", point_encoder="pointbert_stub")
    model = Detector(cfg, 0)
    before = {n: p.detach().clone() for n, p in model.named_parameters() if n.startswith(("image_fm.", "point_fm."))}
    train_epochs(model, tiny_train[:4], StageSchedule(2, 1, 1e-2, "branches_parallel"), "full", 0,
                 TrainSettings(batch_size=2), max_steps=2)
    after = dict(model.named_parameters())
    assert before and all(torch.equal(t, after[n]) for n, t in before.items())


def test_stub_vectors_are_unit_norm(image):
    v = encode_image_foundation(image, FoundationConfig(image_encoder="vit_l_stub"))
    assert float(v.values.norm()) == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("encoder", ["vit_l_stub", "resnet50_stub"])
def test_fresh_image_foundation_branch_is_a_no_op(tiny_val, encoder):
    from promptfuse.config import desk_config
    from promptfuse.model import Detector

    cam = torch.stack([s.camera for s in tiny_val[:2]])
    lid = torch.stack([s.lidar_bev for s in tiny_val[:2]])
    with torch.no_grad():
        a = Detector(desk_config(), 3)(cam, lid)
        b = Detector(desk_config(image_encoder=encoder), 3)(cam, lid)
    assert all(torch.equal(a[k], b[k]) for k in a)
