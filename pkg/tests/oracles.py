"""Independent reference computations used by the tests."""

import numpy as np

from mvc3d.camera import CameraParams


def ray_march_mask(G: np.ndarray, cam: CameraParams, vox, threshold: float, steps: int = 4000) -> np.ndarray:
    """Hard back-projection by stepping along each pixel ray from the camera.

    Whenever the ray crosses a height plane between two samples, the crossing
    point is interpolated and the voxel holding it is looked up.
    """
    W, H = cam.image_size
    occupied = G.reshape(vox.shape) > threshold
    centre = -cam.R.T @ cam.t
    Kinv = np.linalg.inv(cam.K)
    planes = (np.arange(vox.n) + 0.5) * vox.h_vox
    reach = 4.0 * np.linalg.norm(centre) + 4.0 * (vox.a + vox.b) * vox.cell_xy + 10 * vox.n * vox.h_vox
    out = np.zeros((H, W))
    s = np.linspace(0.0, reach, steps)
    for v in range(H):
        for u in range(W):
            d = cam.R.T @ (Kinv @ np.array([u, v, 1.0]))
            d /= np.linalg.norm(d)
            z = centre[2] + s * d[2]
            hit = False
            for l, h in enumerate(planes):
                above = z - h
                cross = np.nonzero((above[:-1] > 0) != (above[1:] > 0))[0]
                for k in cross:
                    frac = above[k] / (above[k] - above[k + 1])
                    p = centre + (s[k] + frac * (s[k + 1] - s[k])) * d
                    ix = int(np.floor((p[0] - vox.origin[0]) / vox.cell_xy))
                    iy = int(np.floor((p[1] - vox.origin[1]) / vox.cell_xy))
                    if 0 <= ix < vox.b and 0 <= iy < vox.a and occupied[l, iy, ix]:
                        hit = True
            out[v, u] = hit
    return out[None]


def pinhole(cam: CameraParams, p) -> tuple[float, float, float]:
    """u = cx + fx * x / z etc. in the camera frame; returns (u, v, depth)."""
    x, y, z = cam.R @ np.asarray(p, dtype=float) + cam.t
    K = cam.K
    return K[0, 0] * x / z + K[0, 1] * y / z + K[0, 2], K[1, 1] * y / z + K[1, 2], z
