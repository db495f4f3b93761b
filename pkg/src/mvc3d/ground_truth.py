"""Ground-truth density maps: per-view 2D maps and scene-level 3D volumes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camera import CameraParams, pixel_rays
from .tensor import Tensor
from .voxels import VoxelGridSpec

log = logging.getLogger(__name__)

SCALE_3D = 1e4
SCALE_2D = 1e3
DEFAULT_HEIGHT_SEARCH = np.arange(1000.0, 2000.0 + 1e-9, 10.0)
FALLBACK_HEAD_HEIGHT = 1750.0
DEFAULT_SIGMA_2D = 3.0


class MissingAnnotationError(ValueError):
    pass


@dataclass
class PersonAnnotationSet:
    person_id: int
    views: list[tuple[int, float, float]]  # (view index, u, v)

    def __post_init__(self):
        idx = [v[0] for v in self.views]
        if len(set(idx)) != len(idx):
            raise ValueError(f"person {self.person_id} has more than one annotation in a view")


@dataclass
class DensityVolume:
    tensor: Tensor  # [1, n, a, b]
    vox: VoxelGridSpec
    scale: float = SCALE_3D
    skipped: list[int] = field(default_factory=list)

    @property
    def count(self) -> float:
        return float(self.tensor.data.sum(dtype=np.float64) / self.scale)


@dataclass
class DensityMap2D:
    tensor: Tensor  # [1, H, W]
    scale: float = SCALE_2D
    skipped: list[int] = field(default_factory=list)

    @property
    def count(self) -> float:
        return float(self.tensor.data.sum(dtype=np.float64) / self.scale)


def height_spread(ann: PersonAnnotationSet, cams: Sequence[CameraParams], heights) -> np.ndarray:
    """Sum of squared distances of per-view plane intersections to their mean, per height."""
    heights = np.asarray(heights, dtype=np.float64)
    pts = _plane_points(ann, cams, heights)  # [M, K, 2]
    return ((pts - pts.mean(axis=0)) ** 2).sum(axis=(0, 2))


def _plane_points(ann, cams, heights) -> np.ndarray:
    out = []
    for i, u, v in ann.views:
        cam = cams[i]
        d = pixel_rays(cam, [[u, v]])[0]
        if abs(d[2]) / np.linalg.norm(d) < 1e-12:
            continue
        c = cam.center
        lam = (heights - c[2]) / d[2]
        out.append(c[:2] + lam[:, None] * d[:2])
    if not out:
        raise MissingAnnotationError(f"person {ann.person_id} has no usable annotation")
    return np.stack(out)


def triangulate_head(
    ann: PersonAnnotationSet,
    cams: Sequence[CameraParams],
    heights=DEFAULT_HEIGHT_SEARCH,
    fallback_height: float = FALLBACK_HEAD_HEIGHT,
) -> np.ndarray:
    """Head position from corresponding view annotations by height search.

    Picks the candidate height where the per-view ray/plane intersections
    agree best, then averages the intersections at that height. A single
    annotation cannot constrain height, so ``fallback_height`` is used.
    """
    if not ann.views:
        raise MissingAnnotationError(f"person {ann.person_id} has no annotations")
    heights = np.asarray(heights, dtype=np.float64)
    if len(ann.views) == 1:
        z = float(fallback_height)
    else:
        spread = height_spread(ann, cams, heights)
        z = float(heights[int(np.argmin(spread))])  # first minimum -> smallest height
    xy = _plane_points(ann, cams, np.array([z]))[:, 0].mean(axis=0)
    return np.array([xy[0], xy[1], z])


def _gaussian_mass(offsets_sq: np.ndarray, sigma: float, keep: np.ndarray) -> np.ndarray:
    w = np.exp(-0.5 * offsets_sq / sigma**2) * keep
    total = w.sum()
    return w / total if total > 0 else w


def splat_3d(points, vox: VoxelGridSpec, sigma3: float | None = None, scale: float = SCALE_3D) -> DensityVolume:
    """Sum of unit-mass 3D Gaussians (truncated at 3 sigma, in mm) times ``scale``."""
    sigma3 = 2.0 * vox.cell_xy if sigma3 is None else float(sigma3)
    if sigma3 <= 0:
        raise ValueError("sigma3 must be positive")
    vol = np.zeros(vox.shape, dtype=np.float64)
    centres = vox.voxel_centers()
    skipped = []
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = vox.contains(pts) if len(pts) else np.zeros(0, bool)
    r = 3.0 * sigma3
    x0, y0 = vox.origin
    for k, p in enumerate(pts):
        if not inside[k]:
            log.warning("skipping point %s outside the voxel grid", p.tolist())
            skipped.append(k)
            continue
        ix0 = max(int(np.floor((p[0] - r - x0) / vox.cell_xy)), 0)
        ix1 = min(int(np.ceil((p[0] + r - x0) / vox.cell_xy)) + 1, vox.b)
        iy0 = max(int(np.floor((p[1] - r - y0) / vox.cell_xy)), 0)
        iy1 = min(int(np.ceil((p[1] + r - y0) / vox.cell_xy)) + 1, vox.a)
        iz0 = max(int(np.floor((p[2] - r) / vox.h_vox)), 0)
        iz1 = min(int(np.ceil((p[2] + r) / vox.h_vox)) + 1, vox.n)
        block = centres[iz0:iz1, iy0:iy1, ix0:ix1]
        d2 = ((block - p) ** 2).sum(axis=-1)
        mass = _gaussian_mass(d2, sigma3, d2 <= r * r)
        if mass.sum() == 0:
            iy, ix, _ = vox.cell_index(p[0], p[1])
            vol[int(p[2] // vox.h_vox), int(iy), int(ix)] += 1.0
            continue
        vol[iz0:iz1, iy0:iy1, ix0:ix1] += mass
    vol *= scale
    return DensityVolume(Tensor(vol[None].astype(np.float32)), vox, scale, skipped)


def rasterize_2d(heads, size: tuple[int, int], sigma2: float = DEFAULT_SIGMA_2D, scale: float = SCALE_2D) -> DensityMap2D:
    """Per-view density map of shape [1, H, W] from (u, v) head positions."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    H, W = size
    out = np.zeros((H, W), dtype=np.float64)
    skipped = []
    r = 3.0 * sigma2
    for k, (u, v) in enumerate(heads):
        if not (-0.5 <= u < W - 0.5 and -0.5 <= v < H - 0.5):
            skipped.append(k)
            continue
        u0, u1 = max(int(np.floor(u - r)), 0), min(int(np.ceil(u + r)) + 1, W)
        v0, v1 = max(int(np.floor(v - r)), 0), min(int(np.ceil(v + r)) + 1, H)
        vv, uu = np.mgrid[v0:v1, u0:u1]
        d2 = (uu - u) ** 2 + (vv - v) ** 2
        mass = _gaussian_mass(d2, sigma2, d2 <= r * r)
        if mass.sum() == 0:
            out[int(round(v)), int(round(u))] += 1.0
            continue
        out[v0:v1, u0:u1] += mass
    out *= scale
    return DensityMap2D(Tensor(out[None].astype(np.float32)), scale, skipped)


def to_map_coords(u: float, v: float, factor: float) -> tuple[float, float]:
    """Map a full-resolution pixel coordinate onto an image resized by ``factor``."""
    return (u + 0.5) * factor - 0.5, (v + 0.5) * factor - 0.5
