"""Training configuration and resolution presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .losses import STAGE_BETA, ConfigError, LossWeights
from .scene import SceneConfig
from .voxels import VoxelGridSpec


@dataclass
class StageConfig:
    epochs: int
    beta: float
    gamma: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.beta < 0 or self.gamma < 0:
            raise ConfigError("stage epochs and loss weights must be non-negative")


@dataclass
class Thresholds:
    T: float = 1e-4  # voxel occupancy threshold for back-projection
    mask: float = 1e-3  # view ground-truth mask threshold
    alpha: float = 1e-5
    tau: float | None = None  # soft back-projection temperature; None -> T/10


@dataclass
class VoxSettings:
    n: int = 7
    h_vox: float = 400.0
    a: int = 32
    b: int = 32
    cell_xy: float = 250.0
    origin: tuple[float, float] = (0.0, 0.0)

    def spec(self) -> VoxelGridSpec:
        return VoxelGridSpec(tuple(self.origin), self.cell_xy, self.a, self.b, self.n, self.h_vox)


def default_stages(gamma: float = 10.0, epochs=(10, 20, 10)) -> list[StageConfig]:
    return [StageConfig(epochs[0], STAGE_BETA[1], 0.0), StageConfig(epochs[1], STAGE_BETA[2], 0.0),
            StageConfig(epochs[2], STAGE_BETA[3], gamma)]


@dataclass
class TrainConfig:
    stages: list[StageConfig] = field(default_factory=default_stages)
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"  # or "linear": decay to zero over all configured stages
    batch_size: int = 1
    optimizer: dict = field(default_factory=lambda: {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8})
    seed: int = 0
    vox: VoxSettings = field(default_factory=VoxSettings)
    thresholds: Thresholds = field(default_factory=Thresholds)
    sigma2: float = 3.0
    sigma3: float | None = None
    channel_scale: float = 1.0
    share_extractor: bool = True
    pcm_mode: str = "soft"  # "soft" surrogate gradient or "hard" (no gradient through the mask)
    train_frames: int | None = None  # first k frames train, the rest test; None -> all train
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError("lr_schedule must be 'constant' or 'linear'")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported")
        if self.pcm_mode not in ("soft", "hard"):
            raise ConfigError("pcm_mode must be 'soft' or 'hard'")
        if not self.stages:
            raise ConfigError("at least one stage is required")

    def weights(self, stage: int) -> LossWeights:
        s = self.stages[stage - 1]
        return LossWeights(s.beta, s.gamma, stage)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        try:
            if "stages" in d:
                d["stages"] = [StageConfig(**s) for s in d["stages"]]
            if "vox" in d:
                d["vox"] = VoxSettings(**d["vox"])
            if "thresholds" in d:
                d["thresholds"] = Thresholds(**d["thresholds"])
            if "scene" in d:
                d["scene"] = SceneConfig(**d["scene"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def preset(name: str) -> TrainConfig:
    """Grid resolutions and PCM weights of the benchmark datasets, plus a CPU-sized ``desk`` setup."""
    if name == "desk":
        return TrainConfig(
            stages=default_stages(10.0, (2, 2, 2)),
            learning_rate=1e-3,
            lr_schedule="linear",
            vox=VoxSettings(n=7, h_vox=400.0, a=32, b=32, cell_xy=250.0),
            sigma2=1.0,
            channel_scale=0.25,
            train_frames=200,
            scene=SceneConfig(n_views=3, n_frames=250, people_range=(1, 8), image_size=(64, 64)),
        )
    if name == "pets":
        return TrainConfig(
            stages=default_stages(100.0),
            vox=VoxSettings(n=7, h_vox=400.0, a=177, b=152, cell_xy=100.0),
            scene=SceneConfig(n_views=3, image_size=(384, 288), extent=(15200.0, 17700.0), ring_radius=16000.0),
        )
    if name == "duke":
        return TrainConfig(
            stages=default_stages(0.5),
            vox=VoxSettings(n=36, h_vox=100.0, a=120, b=160, cell_xy=100.0),
            scene=SceneConfig(n_views=4, image_size=(640, 360), extent=(16000.0, 12000.0), ring_radius=15000.0),
        )
    if name == "city":
        return TrainConfig(
            stages=default_stages(10.0),
            vox=VoxSettings(n=28, h_vox=100.0, a=192, b=160, cell_xy=100.0),
            scene=SceneConfig(n_views=3, image_size=(676, 380), extent=(16000.0, 19200.0), ring_radius=18000.0),
        )
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("pets", "duke", "city", "desk")
