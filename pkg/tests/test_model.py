import numpy as np
import pytest

from mvc3d import tensor as T
from mvc3d.camera import CameraParams
from mvc3d.ground_truth import splat_3d
from mvc3d.losses import LossWeights, loss_2d, loss_3d, loss_total
from mvc3d.model import (
    ModelConfig,
    count_from_volume,
    extract_features,
    forward,
    init_params,
    load_checkpoint,
    parameter_count,
    pooled_cameras,
    save_checkpoint,
)
from mvc3d.projection import project_2d_to_3d
from mvc3d.tensor import ShapeError, Tensor
from mvc3d.voxels import VoxelGridSpec

VOX = VoxelGridSpec((0.0, 0.0), 500.0, a=8, b=8, n=3, h_vox=600.0)


def cameras(n=3, size=(32, 24)):
    target = np.array([2000.0, 2000.0, 800.0])
    out = []
    for k in range(n):
        ang = 2 * np.pi * k / n + 0.3
        pos = target + [7000 * np.cos(ang), 7000 * np.sin(ang), 5000]
        out.append(CameraParams.look_at(pos, target, 20.0, size, name=f"c{k}"))
    return out


def small_config(**kw):
    return ModelConfig(cameras(), VOX, channel_scale=kw.pop("channel_scale", 0.125), **kw)


def images(rng, cfg):
    W, H = cfg.image_size
    return [Tensor(rng.uniform(0, 1, (1, H, W)).astype(np.float32)) for _ in range(cfg.n_views)]


def test_zero_images_give_zero_outputs():
    cfg = small_config()
    W, H = cfg.image_size
    G, V = forward([Tensor(np.zeros((1, H, W), np.float32))] * 3, init_params(cfg, 0), cfg)
    assert G.shape == (1, 3, 8, 8)
    assert not G.data.any()
    assert all(v.shape == (1, H // 4, W // 4) and not v.data.any() for v in V)


def test_full_scale_layer_shapes():
    shapes = ModelConfig(cameras(), VOX).layer_shapes()
    assert shapes["conv1"] == (16, 1, 5, 5)
    assert shapes["conv4"] == (32, 32, 5, 5)
    assert shapes["conv7"] == (1, 32, 5, 5)
    assert shapes["conv3d1"] == (32, 96, 7, 5, 5)
    assert shapes["conv3d3"] == (128, 64, 7, 5, 5)
    assert shapes["conv3d7"] == (1, 32, 7, 5, 5)


def test_separate_extractors():
    shapes = small_config(share_extractor=False).layer_shapes()
    assert {"conv1.v0", "conv1.v2", "conv7.v1"} <= set(shapes)
    assert "conv1" not in shapes


def test_channel_scale_quadruples_inner_layers():
    half = init_params(ModelConfig(cameras(), VOX, channel_scale=0.5))
    full = init_params(ModelConfig(cameras(), VOX, channel_scale=1.0))
    # layers whose in and out channels both scale
    inner = [k for k in full if k.endswith(".weight") and k.split(".")[0] not in ("conv1", "conv7", "conv3d7")]
    ratio = sum(full[k].data.size for k in inner) / sum(half[k].data.size for k in inner)
    assert ratio == pytest.approx(4.0)
    assert 3.5 < parameter_count(full) / parameter_count(half) < 4.0


def test_bad_images():
    cfg = small_config()
    params = init_params(cfg)
    with pytest.raises(ShapeError):
        forward([Tensor(np.zeros((1, 24, 32)))] * 2, params, cfg)
    with pytest.raises(ShapeError):
        forward([Tensor(np.zeros((1, 20, 32)))] * 3, params, cfg)
    with pytest.raises(ValueError):
        ModelConfig(cameras(size=(30, 24)), VOX)


def test_city_street_output_shapes():
    vox = VoxelGridSpec((0.0, 0.0), 100.0, a=192, b=160, n=28, h_vox=100.0)
    target = np.array([8000.0, 9600.0, 800.0])
    cams = [CameraParams.look_at(target + [15000 * np.cos(a), 15000 * np.sin(a), 8000], target, 400.0, (676, 380))
            for a in (0.0, 2.1, 4.2)]
    cfg = ModelConfig(cams, vox, channel_scale=1 / 32)
    assert [c.image_size for c in pooled_cameras(cfg)] == [(169, 95)] * 3
    rng = np.random.default_rng(0)
    G, V = forward([Tensor(rng.uniform(size=(1, 380, 676)).astype(np.float32)) for _ in cams], init_params(cfg), cfg)
    assert G.shape == (1, 28, 192, 160)
    assert all(v.shape == (1, 95, 169) for v in V)


def test_count_from_volume():
    assert count_from_volume(Tensor(np.zeros((1, 3, 8, 8)))) == 0
    pts = [[1000.0 + 400 * k, 2000.0, 1500.0] for k in range(5)]
    vol = splat_3d(pts, VoxelGridSpec((0.0, 0.0), 250.0, a=32, b=32, n=7, h_vox=400.0))
    assert count_from_volume(vol.tensor) == pytest.approx(5, abs=5e-3)


def test_count_matches_direct_sum():
    cfg = small_config()
    G, _ = forward(images(np.random.default_rng(1), cfg), init_params(cfg, 3), cfg)
    assert count_from_volume(G) == pytest.approx(float(np.sum(G.data, dtype=np.float64)) / 1e4, rel=1e-12)


def test_forward_deterministic():
    cfg = small_config()
    imgs = images(np.random.default_rng(2), cfg)
    G1, V1 = forward(imgs, init_params(cfg, 5), cfg)
    G2, V2 = forward(imgs, init_params(cfg, 5), cfg)
    assert G1.data.tobytes() == G2.data.tobytes()
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(V1, V2))


def test_stage_two_gradient_reaches_every_parameter():
    cfg = small_config(channel_scale=0.25)
    rng = np.random.default_rng(3)
    params = init_params(cfg, 1)
    for p in params.values():
        if p.data.ndim == 1:
            p.data = rng.uniform(0.01, 0.1, p.shape).astype(p.data.dtype)
    G, V = forward(images(rng, cfg), params, cfg)
    gt_vol = Tensor(rng.uniform(0, 1, G.shape).astype(np.float32))
    gt_maps = [Tensor(rng.uniform(0, 1, v.shape).astype(np.float32)) for v in V]
    total = loss_total(loss_3d(G, gt_vol), loss_2d(V, gt_maps), 0.0, LossWeights.for_stage(2))
    T.backward(total)
    for name, p in params.items():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_projection_stage_permutation_covariant():
    cfg = small_config()
    params = init_params(cfg, 2)
    imgs = images(np.random.default_rng(4), cfg)
    cams = pooled_cameras(cfg)
    vols = [project_2d_to_3d(extract_features(i, params), c, VOX).data for i, c in zip(imgs, cams)]
    perm = [2, 0, 1]
    permuted = [project_2d_to_3d(extract_features(imgs[k], params), cams[k], VOX).data for k in perm]
    for got, k in zip(permuted, perm):
        assert got.tobytes() == vols[k].tobytes()


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    params = init_params(cfg, 7)
    save_checkpoint(tmp_path / "a.zip", params, cfg, seed=7, stage=3)
    save_checkpoint(tmp_path / "b.zip", params, cfg, seed=7, stage=3)
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    loaded, cfg2, manifest = load_checkpoint(tmp_path / "a.zip")
    assert manifest["seed"] == 7 and manifest["stage"] == 3
    assert set(loaded) == set(params)
    assert all(np.array_equal(loaded[k].data, params[k].data) for k in params)
    assert cfg2.layer_shapes() == cfg.layer_shapes()
    imgs = images(np.random.default_rng(5), cfg)
    assert forward(imgs, loaded, cfg2)[0].data.tobytes() == forward(imgs, params, cfg)[0].data.tobytes()
