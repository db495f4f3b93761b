from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned voxel grid over the ground plane.

    Volumes are stored as [n, a, b]: height, ground y, ground x. Height
    planes sit at voxel centres, ``(l + 0.5) * h_vox``.
    """

    origin: tuple[float, float] = (0.0, 0.0)
    cell_xy: float = 250.0
    a: int = 32
    b: int = 32
    n: int = 7
    h_vox: float = 400.0

    def __post_init__(self):
        if min(self.a, self.b, self.n) < 1:
            raise GridError("a, b and n must be at least 1")
        if self.cell_xy <= 0 or self.h_vox <= 0:
            raise GridError("cell_xy and h_vox must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.a, self.b)

    @property
    def height_range(self) -> float:
        return self.n * self.h_vox

    @property
    def height_planes(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h_vox

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x centres [b], y centres [a])."""
        x0, y0 = self.origin
        return x0 + (np.arange(self.b) + 0.5) * self.cell_xy, y0 + (np.arange(self.a) + 0.5) * self.cell_xy

    def voxel_centers(self) -> np.ndarray:
        """[n, a, b, 3] world coordinates of every voxel centre."""
        xs, ys = self.cell_centers()
        Z, Y, X = np.meshgrid(self.height_planes, ys, xs, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        x0, y0 = self.origin
        return (
            (p[:, 0] >= x0) & (p[:, 0] < x0 + self.b * self.cell_xy)
            & (p[:, 1] >= y0) & (p[:, 1] < y0 + self.a * self.cell_xy)
            & (p[:, 2] >= 0) & (p[:, 2] < self.n * self.h_vox)
        )

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ground cell (iy, ix) containing each (x, y), plus an in-grid mask."""
        x0, y0 = self.origin
        with np.errstate(invalid="ignore"):
            ix = np.floor((np.asarray(x, dtype=np.float64) - x0) / self.cell_xy)
            iy = np.floor((np.asarray(y, dtype=np.float64) - y0) / self.cell_xy)
            ok = (ix >= 0) & (ix < self.b) & (iy >= 0) & (iy < self.a)
        ix = np.where(ok, ix, 0).astype(np.int64)
        iy = np.where(ok, iy, 0).astype(np.int64)
        return iy, ix, ok

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "cell_xy": self.cell_xy, "a": self.a, "b": self.b,
                "n": self.n, "h_vox": self.h_vox}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGridSpec":
        return cls(origin=tuple(d["origin"]), cell_xy=float(d["cell_xy"]), a=int(d["a"]), b=int(d["b"]),
                   n=int(d["n"]), h_vox=float(d["h_vox"]))
