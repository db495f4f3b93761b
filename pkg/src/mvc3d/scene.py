"""Synthetic multi-camera crowd scenes with exact head annotations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .camera import CameraParams, project_points
from .tensor import Tensor

SCHEMA = "mvc3d_scene_v1"
BODY_RADIUS = 250.0
PERSON_INTENSITY = 0.8
PIXEL_NOISE = 0.02


class SceneConfigError(ValueError):
    pass


class SceneValidationError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems[:5]) + (" ..." if len(problems) > 5 else ""))
        self.problems = problems


@dataclass
class SceneConfig:
    n_views: int = 3
    n_frames: int = 10
    people_range: tuple[int, int] = (1, 8)
    origin: tuple[float, float] = (0.0, 0.0)
    extent: tuple[float, float] = (8000.0, 8000.0)  # ground area (x, y) in mm
    margin: float = 500.0
    height_mean: float = 1750.0
    height_std: float = 100.0
    height_clip: tuple[float, float] = (1000.0, 2000.0)
    image_size: tuple[int, int] = (64, 64)
    ring_radius: float = 9000.0
    camera_height: float = 7000.0
    look_at_height: float = 800.0
    step_std: float = 300.0
    recount_prob: float = 0.3

    def __post_init__(self):
        self.people_range = tuple(self.people_range)
        self.origin = tuple(self.origin)
        self.extent = tuple(self.extent)
        self.height_clip = tuple(self.height_clip)
        self.image_size = tuple(self.image_size)
        lo, hi = self.people_range
        if self.n_views < 1 or self.n_frames < 1 or lo < 0 or hi < lo:
            raise SceneConfigError("invalid view, frame or people counts")
        w = self.extent[0] - 2 * self.margin
        d = self.extent[1] - 2 * self.margin
        if w <= 0 or d <= 0:
            raise SceneConfigError("extent too small for the margin")
        # loose packing bound for non-overlapping body discs
        if hi * np.pi * BODY_RADIUS**2 > 0.3 * w * d:
            raise SceneConfigError(f"extent {self.extent} too small for {hi} people")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.origin[0] + self.extent[0] / 2, self.origin[1] + self.extent[1] / 2])


@dataclass
class Person:
    person_id: int
    X: float
    Y: float
    body_height: float

    @property
    def head(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.body_height])


@dataclass
class Annotation:
    person_id: int
    u: float
    v: float
    visible: bool


@dataclass
class Frame:
    frame_id: int
    people: list[Person]
    annotations: list[list[Annotation]]  # per view


@dataclass
class Scene:
    cameras: list[CameraParams]
    frames: list[Frame]
    seed: int = 0
    config: SceneConfig = field(default_factory=SceneConfig)

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"frame {frame_id} not in scene")

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "seed": self.seed,
            "config": asdict(self.config),
            "cameras": [c.to_dict() for c in self.cameras],
            "frames": [
                {
                    "frame_id": f.frame_id,
                    "people": [asdict(p) for p in f.people],
                    "annotations": [[asdict(a) for a in view] for view in f.annotations],
                }
                for f in self.frames
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema") != SCHEMA:
            raise SceneValidationError([f"schema must be {SCHEMA!r}, got {d.get('schema')!r}"])
        try:
            cams = [CameraParams.from_dict(c) for c in d["cameras"]]
            frames = [
                Frame(
                    frame_id=int(f["frame_id"]),
                    people=[Person(**p) for p in f["people"]],
                    annotations=[[Annotation(**a) for a in view] for view in f["annotations"]],
                )
                for f in d["frames"]
            ]
            config = SceneConfig(**d["config"]) if "config" in d else SceneConfig(n_views=len(cams))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneValidationError([f"malformed scene: {exc!r}"]) from exc
        return cls(cams, frames, int(d.get("seed", 0)), config)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SceneValidationError([f"invalid JSON: {exc}"]) from exc
        scene = cls.from_dict(d)
        validate_scene(scene)
        return scene


def ring_cameras(cfg: SceneConfig) -> list[CameraParams]:
    """Cameras evenly spaced on a circle around the area, focal chosen to frame it."""
    c = cfg.center
    target = np.array([c[0], c[1], cfg.look_at_height])
    w, h = cfg.image_size
    x0, y0 = cfg.origin
    X1, Y1 = x0 + cfg.extent[0], y0 + cfg.extent[1]
    corners = np.array([[x, y, z] for x in (x0, X1) for y in (y0, Y1) for z in (0.0, cfg.height_clip[1])])
    cams = []
    for k in range(cfg.n_views):
        ang = 2 * np.pi * k / cfg.n_views + np.pi / 6
        pos = [c[0] + cfg.ring_radius * np.cos(ang), c[1] + cfg.ring_radius * np.sin(ang), cfg.camera_height]
        unit = CameraParams.look_at(pos, target, 1.0, (w, h))
        pc = corners @ unit.R.T + unit.t
        if np.any(pc[:, 2] <= 0):
            raise SceneConfigError("camera ring too close: area extends behind a camera")
        xn, yn = np.abs(pc[:, 0] / pc[:, 2]).max(), np.abs(pc[:, 1] / pc[:, 2]).max()
        focal = 0.98 * min((w - 1) / 2 / xn, (h - 1) / 2 / yn)
        cams.append(CameraParams.look_at(pos, target, focal, (w, h), name=f"cam{k}"))
    return cams


def occluders(cam: CameraParams, people: list[Person], target: int) -> list[int]:
    """Indices of people whose body cylinder crosses the camera->head segment of ``target``."""
    c = cam.center
    head = people[target].head
    d = head - c
    out = []
    for k, p in enumerate(people):
        if k == target:
            continue
        # horizontal line/circle intersection in the segment parameter s
        ox, oy = c[0] - p.X, c[1] - p.Y
        A = d[0] ** 2 + d[1] ** 2
        B = 2 * (ox * d[0] + oy * d[1])
        Cc = ox**2 + oy**2 - BODY_RADIUS**2
        disc = B * B - 4 * A * Cc
        if A == 0 or disc < 0:
            continue
        r = np.sqrt(disc)
        s0, s1 = max((-B - r) / (2 * A), 0.0), min((-B + r) / (2 * A), 1.0)
        if s0 >= s1:
            continue
        # z is linear in s; need the in-cylinder interval to overlap [0, body_height]
        z0, z1 = c[2] + s0 * d[2], c[2] + s1 * d[2]
        if min(z0, z1) <= p.body_height and max(z0, z1) >= 0.0:
            out.append(k)
    return out


def _annotate(cams, people, image_size) -> list[list[Annotation]]:
    W, H = image_size
    views = []
    heads = np.array([p.head for p in people]).reshape(-1, 3)
    for cam in cams:
        uv, depth = project_points(cam, heads)
        anns = []
        for k, p in enumerate(people):
            if depth[k] <= 0:
                continue
            u, v = float(uv[k, 0]), float(uv[k, 1])
            inside = -0.5 <= u < W - 0.5 and -0.5 <= v < H - 0.5
            visible = inside and not occluders(cam, people, k)
            anns.append(Annotation(p.person_id, u, v, bool(visible)))
        views.append(anns)
    return views


def _sample_height(rng, cfg: SceneConfig) -> float:
    return float(np.clip(rng.normal(cfg.height_mean, cfg.height_std), *cfg.height_clip))


def _free_spot(rng, cfg: SceneConfig, taken: list[tuple[float, float]]):
    lo = np.array(cfg.origin) + cfg.margin
    hi = np.array(cfg.origin) + np.array(cfg.extent) - cfg.margin
    for _ in range(1000):
        xy = rng.uniform(lo, hi)
        if all((xy[0] - x) ** 2 + (xy[1] - y) ** 2 >= (2 * BODY_RADIUS) ** 2 for x, y in taken):
            return float(xy[0]), float(xy[1])
    raise SceneConfigError("could not place a person without overlap; enlarge the extent")


def gen_scene(seed: int, cfg: SceneConfig | None = None, **overrides) -> Scene:
    """Random-walk crowd over ``cfg.n_frames`` frames seen by a camera ring.

    Each frame draws from its own substream of ``seed``; with probability
    ``recount_prob`` the head count is redrawn and people enter or leave.
    """
    if cfg is None:
        cfg = SceneConfig(**overrides)
    elif overrides:
        cfg = replace(cfg, **overrides)
    cams = ring_cameras(cfg)
    lo_b = np.array(cfg.origin) + cfg.margin
    hi_b = np.array(cfg.origin) + np.array(cfg.extent) - cfg.margin
    people: list[Person] = []
    next_id = 0
    frames = []
    for f in range(cfg.n_frames):
        rng = np.random.default_rng([seed, f])
        # walk existing people, rejecting steps that would overlap a neighbour
        for i, p in enumerate(people):
            step = rng.normal(0.0, cfg.step_std, 2)
            nxt = np.clip(np.array([p.X, p.Y]) + step, lo_b, hi_b)
            others = [(q.X, q.Y) for j, q in enumerate(people) if j != i]
            if all((nxt[0] - x) ** 2 + (nxt[1] - y) ** 2 >= (2 * BODY_RADIUS) ** 2 for x, y in others):
                p.X, p.Y = float(nxt[0]), float(nxt[1])
        if f == 0 or rng.random() < cfg.recount_prob:
            target = int(rng.integers(cfg.people_range[0], cfg.people_range[1] + 1))
        else:
            target = len(people)
        while len(people) > target:
            people.pop(int(rng.integers(len(people))))
        while len(people) < target:
            x, y = _free_spot(rng, cfg, [(q.X, q.Y) for q in people])
            people.append(Person(next_id, x, y, _sample_height(rng, cfg)))
            next_id += 1
        snapshot = [Person(p.person_id, p.X, p.Y, p.body_height) for p in people]
        frames.append(Frame(f, snapshot, _annotate(cams, snapshot, cfg.image_size)))
    return Scene(cams, frames, seed, cfg)


def validate_scene(scene: Scene, tol_px: float = 0.5) -> None:
    problems = []
    for f in scene.frames:
        ids = [p.person_id for p in f.people]
        if len(set(ids)) != len(ids):
            problems.append(f"frame {f.frame_id}: duplicate person_id")
        if len(f.annotations) != len(scene.cameras):
            problems.append(f"frame {f.frame_id}: {len(f.annotations)} annotation lists for {len(scene.cameras)} cameras")
            continue
        by_id = {p.person_id: p for p in f.people}
        for i, (cam, anns) in enumerate(zip(scene.cameras, f.annotations)):
            for a in anns:
                p = by_id.get(a.person_id)
                if p is None:
                    problems.append(f"frame {f.frame_id} view {i}: unknown person {a.person_id}")
                    continue
                if not a.visible:
                    continue
                uv, depth = project_points(cam, p.head)
                if depth[0] <= 0 or np.hypot(*(uv[0] - [a.u, a.v])) > tol_px:
                    problems.append(f"frame {f.frame_id} view {i}: person {a.person_id} annotation off by more than {tol_px}px")
    if problems:
        raise SceneValidationError(problems)


def render_views(scene: Scene, frame_id: int, image_size: tuple[int, int] | None = None) -> list[Tensor]:
    """Grey capsule silhouettes (foot to head) plus seeded Gaussian pixel noise.

    Noise is zero-mean and not clipped, so background pixels average to 0.
    """
    frame = scene.frame(frame_id)
    rng = np.random.default_rng([scene.seed, frame_id, 7])
    out = []
    for cam in scene.cameras:
        if image_size is not None and tuple(image_size) != cam.image_size:
            cam = cam.scaled(image_size[0] / cam.width)
        W, H = cam.image_size
        vv, uu = np.mgrid[0:H, 0:W]
        hom = np.stack([uu.ravel(), vv.ravel(), np.ones(H * W)], axis=1).astype(np.float64)
        rays = (hom @ np.linalg.inv(cam.K).T) @ cam.R
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        depth_buf = np.full(H * W, np.inf)
        img = np.zeros(H * W)
        for p in frame.people:
            hit, dist = _capsule_hits(cam.center, rays, p)
            nearer = hit & (dist < depth_buf)
            depth_buf[nearer] = dist[nearer]
            img[nearer] = PERSON_INTENSITY
        img += rng.normal(0.0, PIXEL_NOISE, H * W)
        out.append(Tensor(img.reshape(1, H, W).astype(np.float32)))
    return out


def _capsule_hits(origin, rays, p: Person):
    """Which unit rays pass within BODY_RADIUS of the person's axis, and where."""
    a = np.array([p.X, p.Y, 0.0])
    e = np.array([0.0, 0.0, p.body_height])
    w0 = origin - a
    b = rays @ e
    c = e @ e
    dd = rays @ w0
    ee = e @ w0
    denom = c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 1e-12, (ee - b * dd) / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    s = np.maximum(t * b - dd, 0.0)
    t = np.clip((s * b + ee) / c, 0.0, 1.0)
    closest_ray = origin + s[:, None] * rays
    closest_axis = a + t[:, None] * e
    dist = np.linalg.norm(closest_ray - closest_axis, axis=1)
    return (dist <= BODY_RADIUS) & (s > 0), s


def to_pgm(image: Tensor) -> bytes:
    arr = np.clip(image.data.reshape(image.shape[-2:]), 0.0, 1.0)
    H, W = arr.shape
    return f"P5\n{W} {H}\n255\n".encode() + np.round(arr * 255).astype(np.uint8).tobytes()
