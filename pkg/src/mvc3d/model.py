"""Multi-view network: shared 2D feature branch, per-view density decoder,
multi-height projection and a 3D fusion decoder."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .camera import CameraParams
from .ground_truth import SCALE_3D
from .projection import project_2d_to_3d
from .tensor import ShapeError, Tensor
from .voxels import VoxelGridSpec

# (out, in) channel counts at channel_scale=1; None marks a channel count fixed at 1
FEATURE_LAYERS = [("conv1", 16, None), ("conv2", 16, 16), ("conv3", 32, 16), ("conv4", 32, 32)]
DECODER_2D_LAYERS = [("conv5", 64, 32), ("conv6", 32, 64), ("conv7", None, 32)]
FUSION_LAYERS = [
    ("conv3d1", 32, "concat"), ("conv3d2", 64, 32), ("conv3d3", 128, 64), ("conv3d4", 64, 128),
    ("conv3d5", 32, 64), ("conv3d6", 32, 32), ("conv3d7", None, 32),
]
KERNEL_2D = (5, 5)
KERNEL_3D = (7, 5, 5)  # (depth along z, ground y, ground x)
POOLED_FACTOR = 0.25


@dataclass
class ModelConfig:
    cameras: list[CameraParams]
    vox: VoxelGridSpec
    channel_scale: float = 1.0
    share_extractor: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")
        sizes = {c.image_size for c in self.cameras}
        if len(sizes) != 1:
            raise ValueError("all cameras must share one image size")
        w, h = sizes.pop()
        if w % 4 or h % 4:
            raise ValueError(f"image size {w}x{h} must be divisible by 4")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.cameras[0].image_size

    def channels(self, c: int | None) -> int:
        return 1 if c is None else max(1, int(round(c * self.channel_scale)))

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        branches = [""] if self.share_extractor else [f".v{i}" for i in range(self.n_views)]
        for suffix in branches:
            for name, cout, cin in FEATURE_LAYERS + DECODER_2D_LAYERS:
                shapes[name + suffix] = (self.channels(cout), self.channels(cin), *KERNEL_2D)
        feat = self.channels(FEATURE_LAYERS[-1][1])
        for name, cout, cin in FUSION_LAYERS:
            cin_n = feat * self.n_views if cin == "concat" else self.channels(cin)
            shapes[name] = (self.channels(cout), cin_n, *KERNEL_3D)
        return shapes

    def to_dict(self) -> dict:
        return {
            "cameras": [c.to_dict() for c in self.cameras],
            "vox": self.vox.to_dict(),
            "channel_scale": self.channel_scale,
            "share_extractor": self.share_extractor,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            cameras=[CameraParams.from_dict(c) for c in d["cameras"]],
            vox=VoxelGridSpec.from_dict(d["vox"]),
            channel_scale=float(d["channel_scale"]),
            share_extractor=bool(d.get("share_extractor", True)),
            dtype=d.get("dtype", "float32"),
        )


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """He-uniform kernels (bound sqrt(6 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.layer_shapes().items():
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name + ".weight"] = Tensor(rng.uniform(-bound, bound, shape).astype(cfg.dtype), requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(shape[0], dtype=cfg.dtype), requires_grad=True)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def _conv2d(x, params, name, act=True):
    y = T.conv2d(x, params[name + ".weight"], params[name + ".bias"])
    return T.relu(y) if act else y


def extract_features(image: Tensor, params, suffix: str = "") -> Tensor:
    h = _conv2d(image, params, "conv1" + suffix)
    h = _conv2d(h, params, "conv2" + suffix)
    h = T.maxpool2(h)
    h = _conv2d(h, params, "conv3" + suffix)
    h = _conv2d(h, params, "conv4" + suffix)
    return T.maxpool2(h)


def decode_view(features: Tensor, params, suffix: str = "") -> Tensor:
    h = _conv2d(features, params, "conv5" + suffix)
    h = _conv2d(h, params, "conv6" + suffix)
    return _conv2d(h, params, "conv7" + suffix, act=False)


def fuse(volume: Tensor, params) -> Tensor:
    h = volume
    last = FUSION_LAYERS[-1][0]
    for name, _, _ in FUSION_LAYERS:
        h = T.conv3d(h, params[name + ".weight"], params[name + ".bias"])
        if name != last:
            h = T.relu(h)
    return h


def forward(images: Sequence[Tensor], params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, list[Tensor]]:
    """Returns (G [1, n, a, b], per-view density maps [1, H/4, W/4])."""
    if len(images) != cfg.n_views:
        raise ShapeError(f"expected {cfg.n_views} views, got {len(images)}")
    W, H = cfg.image_size
    views, projected = [], []
    for i, (img, cam) in enumerate(zip(images, cfg.cameras)):
        if img.shape != (1, H, W):
            raise ShapeError(f"view {i}: image shape {img.shape} != {(1, H, W)}")
        suffix = "" if cfg.share_extractor else f".v{i}"
        feats = extract_features(img, params, suffix)
        views.append(decode_view(feats, params, suffix))
        projected.append(project_2d_to_3d(feats, _pooled_camera(cam), cfg.vox))
    G = fuse(T.concat(projected, axis=0), params)
    return G, views


_pooled_cache: dict = {}


def _pooled_camera(cam: CameraParams) -> CameraParams:
    pooled = _pooled_cache.get(cam)
    if pooled is None:
        pooled = _pooled_cache[cam] = cam.scaled(POOLED_FACTOR)
    return pooled


def pooled_cameras(cfg: ModelConfig) -> list[CameraParams]:
    return [_pooled_camera(c) for c in cfg.cameras]


def count_from_volume(G, scale: float = SCALE_3D) -> float:
    data = G.data if isinstance(G, Tensor) else np.asarray(G)
    return float(data.sum(dtype=np.float64) / scale)


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig, **meta) -> None:
    """Zip of T3DC tensors plus manifest.json; byte-identical for identical inputs."""
    manifest = {
        "format": "mvc3d_checkpoint_v1",
        "tensors": {name: list(p.shape) for name, p in params.items()},
        "config": cfg.to_dict(),
        **meta,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_DATE), json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(params):
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.t3dc", _ZIP_DATE), T.t3dc_bytes(params[name]))


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        cfg = ModelConfig.from_dict(manifest["config"])
        params = {}
        for name, shape in manifest["tensors"].items():
            arr = T.read_t3dc(io.BytesIO(zf.read(f"tensors/{name}.t3dc")))
            if list(arr.shape) != shape:
                raise T.FormatError(f"tensor {name} has shape {arr.shape}, manifest says {shape}")
            params[name] = Tensor(arr.astype(cfg.dtype), requires_grad=True)
    return params, cfg, manifest
