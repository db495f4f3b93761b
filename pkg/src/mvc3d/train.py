"""Staged training and evaluation on a scene with precomputed ground truth."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .dataset import FrameGT, pooled
from .losses import ConfigError, loss_2d, loss_3d, loss_pcm, loss_total, pcm, view_mask
from .model import ModelConfig, count_from_volume, forward, init_params
from .projection import backproject_3d_to_2d_mask, backproject_soft
from .scene import Scene, render_views
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    def __init__(self, message: str, step: int, params: dict | None = None):
        super().__init__(message)
        self.step = step
        self.params = params


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def model_config(scene: Scene, cfg: TrainConfig, vox) -> ModelConfig:
    return ModelConfig(list(scene.cameras), vox, cfg.channel_scale, cfg.share_extractor)


def split_frames(gts: list[FrameGT], cfg: TrainConfig) -> tuple[list[FrameGT], list[FrameGT]]:
    k = len(gts) if cfg.train_frames is None else cfg.train_frames
    return gts[:k], gts[k:]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model_cfg: ModelConfig
    history: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    seconds: float = 0.0


def _step_losses(G, V, gt: FrameGT, masks, cams_pooled, vox, cfg: TrainConfig, gamma: float):
    l3d = loss_3d(G, gt.volume)
    l2d = loss_2d(V, gt.maps)
    th = cfg.thresholds
    hard = [backproject_3d_to_2d_mask(G, c, vox, th.T) for c in cams_pooled]
    lpcm_hard = loss_pcm(masks, hard, th.alpha)
    if gamma > 0 and cfg.pcm_mode == "soft":
        soft = [backproject_soft(G, c, vox, th.T, th.tau) for c in cams_pooled]
        lpcm = loss_pcm(masks, soft, th.alpha)
    else:
        lpcm = lpcm_hard
    return l3d, l2d, lpcm, lpcm_hard


def train(
    scene: Scene, gts: list[FrameGT], vox, cfg: TrainConfig, log_file=None, images=None,
    params: dict[str, Tensor] | None = None, stages: list[int] | None = None, on_epoch=None,
) -> TrainResult:
    """Runs the configured stages over the training frames, one frame per step.

    ``stages`` picks a subset (1-based) and ``params`` a starting point, so a
    run can be split stage by stage; optimizer moments restart each call.
    ``on_epoch(stage, epoch, params)`` is called after every epoch.
    ``log_file`` receives one JSON line per step. Raises ``NumericError`` on
    a non-finite loss, leaving the parameters as they were before that step.
    """
    T.set_deterministic()
    started = time.perf_counter()
    mcfg = model_config(scene, cfg, vox)
    if params is None:
        params = init_params(mcfg, cfg.seed)
    if stages is None:
        stages = list(range(1, len(cfg.stages) + 1))
    if any(not 1 <= k <= len(cfg.stages) for k in stages):
        raise ConfigError(f"stages {stages} outside 1..{len(cfg.stages)}")
    opt_cfg = cfg.optimizer
    opt = Adam(params, cfg.learning_rate, opt_cfg.get("beta1", 0.9), opt_cfg.get("beta2", 0.999),
               opt_cfg.get("eps", 1e-8))
    train_set, _ = split_frames(gts, cfg)
    if images is None:
        images = {g.frame_id: render_views(scene, g.frame_id) for g in train_set}
    cams_pooled = pooled(scene.cameras)
    masks = {g.frame_id: [view_mask(m, cfg.thresholds.mask) for m in g.maps] for g in train_set}
    n_train = len(train_set)
    total_steps = sum(s.epochs for s in cfg.stages) * n_train
    history = []
    step = 0
    total_value = float("nan")
    for stage_idx in stages:
        stage = cfg.stages[stage_idx - 1]
        w = cfg.weights(stage_idx)
        rng = np.random.default_rng([cfg.seed, stage_idx])
        offset = sum(s.epochs for s in cfg.stages[:stage_idx - 1]) * n_train
        for epoch in range(stage.epochs):
            order = rng.permutation(len(train_set))
            for i, k in enumerate(order):
                if cfg.lr_schedule == "linear":
                    opt.lr = cfg.learning_rate * (1 - (offset + epoch * n_train + i) / total_steps)
                gt = train_set[k]
                G, V = forward(images[gt.frame_id], params, mcfg)
                l3d, l2d, lpcm, lpcm_hard = _step_losses(G, V, gt, masks[gt.frame_id], cams_pooled, vox, cfg, w.gamma)
                total = loss_total(l3d, l2d, lpcm, w)
                total_value = total.item()
                record = {"step": step, "stage": stage_idx, "epoch": epoch, "frame": gt.frame_id,
                          "l3d": l3d.item(), "l2d": l2d.item(), "lpcm": lpcm_hard.item(), "total": total_value}
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if not math.isfinite(total_value):
                    raise NumericError(f"non-finite loss at step {step}", step, params)
                T.backward(total)
                opt.step()
                opt.zero_grad()
                history.append(record)
                step += 1
            log.info("stage %d epoch %d: mean total %.4f", stage_idx, epoch,
                     np.mean([h["total"] for h in history[-len(order):]]) if len(order) else float("nan"))
            if on_epoch is not None:
                on_epoch(stage_idx, epoch, params)
    return TrainResult(params, mcfg, history, total_value, time.perf_counter() - started)


def evaluate(scene: Scene, gts: list[FrameGT], params, mcfg: ModelConfig, cfg: TrainConfig, predictions=None) -> dict:
    """Scene-count MAE, per-view 2D count MAE and mean hard-mask PCM.

    ``predictions`` maps frame_id -> (G, V) and bypasses the network (used to
    score ground truth against itself).
    """
    vox = mcfg.vox
    cams_pooled = pooled(scene.cameras)
    th = cfg.thresholds
    abs_err, view_err, pcms, per_frame = [], [], [], []
    for gt in gts:
        if predictions is not None:
            G, V = predictions[gt.frame_id]
        else:
            G, V = forward(render_views(scene, gt.frame_id), params, mcfg)
        pred = count_from_volume(G)
        abs_err.append(abs(pred - gt.count))
        for v, c in zip(V, gt.view_counts):
            view_err.append(abs(float(v.data.sum(dtype=np.float64)) / 1e3 - c))
        masks = [view_mask(m, th.mask) for m in gt.maps]
        for cam, m in zip(cams_pooled, masks):
            pcms.append(pcm(m, backproject_3d_to_2d_mask(G, cam, vox, th.T), th.alpha).item())
        per_frame.append({"frame_id": gt.frame_id, "pred": pred, "true": gt.count})
    return {
        "frames": len(gts),
        "mae": float(np.mean(abs_err)) if abs_err else float("nan"),
        "view_mae": float(np.mean(view_err)) if view_err else float("nan"),
        "pcm": float(np.mean(pcms)) if pcms else float("nan"),
        "per_frame": per_frame,
    }
