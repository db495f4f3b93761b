"""Per-frame ground truth built from a scene, and its on-disk layout.

A ground-truth directory holds ``manifest.json`` (grid and kernel settings),
``report.json`` (recovered heads, skipped people) and one T3DC file per
frame volume and per view map.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from . import tensor as T
from .camera import CameraParams
from .ground_truth import (
    DEFAULT_SIGMA_2D,
    MissingAnnotationError,
    PersonAnnotationSet,
    rasterize_2d,
    splat_3d,
    to_map_coords,
    triangulate_head,
)
from .scene import Frame, Scene
from .tensor import Tensor
from .voxels import VoxelGridSpec

MAP_FACTOR = 0.25
GT_SCHEMA = "mvc3d_gt_v1"


@dataclass
class FrameGT:
    frame_id: int
    volume: Tensor  # [1, n, a, b], scaled by 1e4
    maps: list[Tensor]  # per view [1, H/4, W/4], scaled by 1e3
    count: int  # people splatted into the volume
    view_counts: list[int]
    report: dict = field(default_factory=dict)


def annotation_sets(frame: Frame) -> list[PersonAnnotationSet]:
    """Visible annotations grouped by person, in person-id order."""
    by_id: dict[int, list] = {p.person_id: [] for p in frame.people}
    for i, view in enumerate(frame.annotations):
        for a in view:
            if a.visible:
                by_id.setdefault(a.person_id, []).append((i, a.u, a.v))
    return [PersonAnnotationSet(pid, views) for pid, views in sorted(by_id.items())]


def frame_ground_truth(
    scene: Scene, frame: Frame, vox: VoxelGridSpec,
    sigma2: float = DEFAULT_SIGMA_2D, sigma3: float | None = None, factor: float = MAP_FACTOR,
) -> FrameGT:
    cams = scene.cameras
    heads, report_people, unannotated = [], [], []
    truth = {p.person_id: p for p in frame.people}
    for ann in annotation_sets(frame):
        try:
            head = triangulate_head(ann, cams)
        except MissingAnnotationError:
            unannotated.append(ann.person_id)
            continue
        heads.append(head)
        entry = {"person_id": ann.person_id, "views": len(ann.views), "head": [float(x) for x in head]}
        if ann.person_id in truth:
            entry["true_height"] = truth[ann.person_id].body_height
        report_people.append(entry)
    vol = splat_3d(heads, vox, sigma3)
    skipped = [report_people[k]["person_id"] for k in vol.skipped]
    maps, view_counts = [], []
    for i, cam in enumerate(cams):
        W, H = cam.image_size
        size = (round(H * factor), round(W * factor))
        pts = [to_map_coords(a.u, a.v, factor) for a in frame.annotations[i] if a.visible]
        m = rasterize_2d(pts, size, sigma2)
        maps.append(m.tensor)
        view_counts.append(len(pts) - len(m.skipped))
    report = {
        "frame_id": frame.frame_id,
        "people": report_people,
        "unannotated": unannotated,
        "outside_grid": skipped,
    }
    return FrameGT(frame.frame_id, vol.tensor, maps, len(heads) - len(skipped), view_counts, report)


def build_ground_truth(scene: Scene, vox: VoxelGridSpec, sigma2=DEFAULT_SIGMA_2D, sigma3=None) -> list[FrameGT]:
    return [frame_ground_truth(scene, f, vox, sigma2, sigma3) for f in scene.frames]


def save_ground_truth(out_dir, gts: list[FrameGT], vox: VoxelGridSpec, sigma2: float, sigma3: float | None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "schema": GT_SCHEMA,
        "vox": vox.to_dict(),
        "sigma2": sigma2,
        "sigma3": 2.0 * vox.cell_xy if sigma3 is None else sigma3,
        "map_factor": MAP_FACTOR,
        "frames": [
            {"frame_id": g.frame_id, "count": g.count, "view_counts": g.view_counts,
             "volume": f"frame_{g.frame_id:05d}_volume.t3dc",
             "maps": [f"frame_{g.frame_id:05d}_view{i}.t3dc" for i in range(len(g.maps))]}
            for g in gts
        ],
    }
    for g, entry in zip(gts, manifest["frames"]):
        T.save_t3dc(os.path.join(out_dir, entry["volume"]), g.volume)
        for m, name in zip(g.maps, entry["maps"]):
            T.save_t3dc(os.path.join(out_dir, name), m)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump({"frames": [g.report for g in gts]}, fh, indent=1, sort_keys=True)


def load_ground_truth(gt_dir) -> tuple[list[FrameGT], VoxelGridSpec, dict]:
    with open(os.path.join(gt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != GT_SCHEMA:
        raise T.FormatError(f"{gt_dir}: not a {GT_SCHEMA} directory")
    vox = VoxelGridSpec.from_dict(manifest["vox"])
    gts = []
    for entry in manifest["frames"]:
        vol = Tensor(T.load_t3dc(os.path.join(gt_dir, entry["volume"])))
        maps = [Tensor(T.load_t3dc(os.path.join(gt_dir, m))) for m in entry["maps"]]
        gts.append(FrameGT(entry["frame_id"], vol, maps, entry["count"], entry["view_counts"]))
    return gts, vox, manifest


def pooled(cams: list[CameraParams]) -> list[CameraParams]:
    return [c.scaled(MAP_FACTOR) for c in cams]
