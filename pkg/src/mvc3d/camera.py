"""Pinhole cameras and world/image mappings.

Conventions: world Z is up with the ground plane at Z=0, units are mm.
The camera frame has x right, y down, z forward. Pixel (u, v) = (column,
row) with integer values at pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .voxels import VoxelGridSpec

BEHIND_CAMERA = -1.0e6


class DegenerateRayError(ValueError):
    pass


class CameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CameraParams:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]  # (width, height)
    name: str = field(default="")

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6 or abs(np.linalg.det(R) - 1) >= 1e-6:
            raise CameraError("R must be a proper rotation")
        if np.abs(np.tril(K, -1)).max() > 0 or K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1:
            raise CameraError("K must be upper-triangular with positive focal lengths and K[2,2]=1")
        w, h = (int(s) for s in self.image_size)
        if w < 1 or h < 1:
            raise CameraError("image_size must be positive")
        for arr in (K, R, t):
            arr.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "image_size", (w, h))
        object.__setattr__(self, "_Kinv", np.linalg.inv(K))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def key(self) -> tuple:
        return (self.K.tobytes(), self.R.tobytes(), self.t.tobytes(), self.image_size)

    def __eq__(self, other):
        return isinstance(other, CameraParams) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def scaled(self, factor: float) -> "CameraParams":
        """Camera for the image resized by ``factor`` (e.g. 0.25 after two poolings).

        Pixel ``p`` of the resized image covers the original pixels whose
        centres average to ``(p + 0.5) / factor - 0.5``.
        """
        w, h = self.image_size
        nw, nh = round(w * factor), round(h * factor)
        if abs(nw - w * factor) > 1e-9 or abs(nh - h * factor) > 1e-9:
            raise CameraError(f"image size {self.image_size} is not divisible by 1/{factor}")
        S = np.array([[factor, 0, 0.5 * factor - 0.5], [0, factor, 0.5 * factor - 0.5], [0, 0, 1]])
        return CameraParams(S @ self.K, self.R, self.t, (nw, nh), self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "K": self.K.reshape(-1).tolist(),
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(
            K=np.asarray(d["K"], dtype=np.float64).reshape(3, 3),
            R=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.asarray(d["t"], dtype=np.float64),
            image_size=tuple(d["image_size"]),
            name=d.get("name", ""),
        )

    @classmethod
    def look_at(cls, position, target, focal: float, image_size, name: str = "") -> "CameraParams":
        """Camera at ``position`` whose optical axis passes through ``target``."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # looking straight down: pick world +X as image right
            right = np.array([1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w, h = image_size
        K = np.array([[focal, 0, (w - 1) / 2], [0, focal, (h - 1) / 2], [0, 0, 1]])
        return cls(K, R, -R @ position, (w, h), name)


def project_points(cam: CameraParams, points) -> tuple[np.ndarray, np.ndarray]:
    """Project [N, 3] world points; returns ([N, 2] pixel coords, [N] camera depth)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = pts @ cam.R.T + cam.t
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        hom = pc @ cam.K.T
        uv = hom[:, :2] / hom[:, 2:3]
    return uv, depth


def world_to_image(cam: CameraParams, p) -> tuple[float, float, bool]:
    uv, depth = project_points(cam, p)
    return float(uv[0, 0]), float(uv[0, 1]), bool(depth[0] > 0)


def pixel_rays(cam: CameraParams, uv) -> np.ndarray:
    """World-frame ray directions for [N, 2] pixels, scaled to unit camera depth."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    return (hom @ cam._Kinv.T) @ cam.R


def backproject_to_height(cam: CameraParams, uv, h) -> tuple[np.ndarray, np.ndarray]:
    """Intersect pixel rays with the plane Z=h.

    Returns ([N, 3] points, [N] camera depth of each intersection). Rays
    parallel to the plane yield NaN points and zero depth.
    """
    d = pixel_rays(cam, uv)
    c = cam.center
    dz_unit = d[:, 2] / np.linalg.norm(d, axis=1)
    ok = np.abs(dz_unit) >= 1e-12
    lam = np.where(ok, (h - c[2]) / np.where(ok, d[:, 2], 1.0), np.nan)
    pts = c + lam[:, None] * d
    pts[:, 2] = np.where(ok, h, np.nan)
    return pts, np.where(ok, lam, 0.0)


def image_to_world_at_height(cam: CameraParams, u: float, v: float, h: float) -> np.ndarray:
    pts, _ = backproject_to_height(cam, [[u, v]], h)
    if np.isnan(pts[0, 0]):
        raise DegenerateRayError(f"ray through ({u}, {v}) is parallel to the plane Z={h}")
    return pts[0]


def precompute_sampling_grid(cam: CameraParams, vox: VoxelGridSpec, h: float) -> Tensor:
    """Image coordinates of every ground cell centre lifted to height ``h``.

    Output is [2, a*b] (rows u, v) in row-major (y, x) cell order. Cells
    behind the camera carry a sentinel far outside any image.
    """
    xs, ys = vox.cell_centers()
    X, Y = np.meshgrid(xs, ys)  # [a, b]
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(h))], axis=1)
    uv, depth = project_points(cam, pts)
    uv[depth <= 0] = BEHIND_CAMERA
    return Tensor(np.ascontiguousarray(uv.T), dtype=np.float64)
