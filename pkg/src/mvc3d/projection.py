"""Fixed multi-height projections between camera views and the voxel grid."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .camera import CameraParams, backproject_to_height, precompute_sampling_grid
from .tensor import ShapeError, Tensor
from .voxels import VoxelGridSpec

PCM_VOXEL_THRESHOLD = 1e-4


@lru_cache(maxsize=256)
def sampling_grids(cam: CameraParams, vox: VoxelGridSpec) -> Tensor:
    """[2, n*a*b] image coordinates of all voxel centres, height plane major."""
    grids = [precompute_sampling_grid(cam, vox, h).data for h in vox.height_planes]
    return Tensor(np.concatenate(grids, axis=1), dtype=np.float64)


@lru_cache(maxsize=256)
def backprojection_table(cam: CameraParams, vox: VoxelGridSpec) -> np.ndarray:
    """Flat voxel index hit by each pixel's ray on each height plane.

    Returns [n, H*W] int64; -1 where the ray is parallel to the plane, meets
    it behind the camera, or leaves the grid.
    """
    W, H = cam.image_size
    vv, uu = np.mgrid[0:H, 0:W]
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    table = np.full((vox.n, H * W), -1, dtype=np.int64)
    for l, h in enumerate(vox.height_planes):
        pts, depth = backproject_to_height(cam, uv, h)
        iy, ix, ok = vox.cell_index(pts[:, 0], pts[:, 1])
        ok &= depth > 0
        table[l] = np.where(ok, (l * vox.a + iy) * vox.b + ix, -1)
    table.setflags(write=False)
    return table


def project_2d_to_3d(F: Tensor, cam: CameraParams, vox: VoxelGridSpec) -> Tensor:
    """Lift a [C, H, W] feature map onto every height plane: [C, n, a, b].

    ``cam`` must describe the feature map's own resolution (see
    ``CameraParams.scaled``).
    """
    if F.data.ndim != 3:
        raise ShapeError("project_2d_to_3d: expected features [C, H, W]")
    C, H, W = F.shape
    if (W, H) != cam.image_size:
        raise ShapeError(f"feature map {W}x{H} does not match camera image size {cam.image_size}")
    sampled = T.bilinear_sample(F, sampling_grids(cam, vox))
    return T.reshape(sampled, (C, vox.n, vox.a, vox.b))


def _check_volume(G: Tensor, vox: VoxelGridSpec) -> None:
    if G.shape != (1, *vox.shape):
        raise ShapeError(f"volume shape {G.shape} does not match grid {(1, *vox.shape)}")


def backproject_3d_to_2d_mask(
    G: Tensor, cam: CameraParams, vox: VoxelGridSpec, threshold: float = PCM_VOXEL_THRESHOLD
) -> Tensor:
    """Binary [1, H, W] mask of pixels whose ray meets a voxel above ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    _check_volume(G, vox)
    table = backprojection_table(cam, vox)
    occupied = (G.data.reshape(-1) > threshold)
    hits = np.where(table >= 0, occupied[np.maximum(table, 0)], False)
    W, H = cam.image_size
    return Tensor(np.sign(hits.sum(axis=0)).reshape(1, H, W).astype(G.data.dtype))


def backproject_soft(
    G: Tensor, cam: CameraParams, vox: VoxelGridSpec,
    threshold: float = PCM_VOXEL_THRESHOLD, tau: float | None = None,
) -> Tensor:
    """Differentiable stand-in for the hard back-projection mask.

    Voxel occupancy becomes sigmoid((G - threshold) / tau) and the union over
    height planes becomes 1 - prod(1 - s). ``tau`` defaults to threshold/10.
    """
    tau = threshold / 10 if tau is None else tau
    if tau <= 0:
        raise ValueError("tau must be positive")
    _check_volume(G, vox)
    occupancy = T.sigmoid(T.scale(T.shift(G, -threshold), 1.0 / tau))
    per_plane = T.take(occupancy, backprojection_table(cam, vox))
    W, H = cam.image_size
    return T.reshape(T.noisy_or(per_plane, axis=0), (1, H, W))
