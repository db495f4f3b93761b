"""Training objectives and the projection consistency measure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PCM_ALPHA = 1e-5
VIEW_MASK_THRESHOLD = 1e-3

# stage -> 2D loss weight
STAGE_BETA = {1: 1.0, 2: 0.01, 3: 0.01}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta: float
    gamma: float
    stage: int = 3

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"unknown stage {self.stage}")

    @classmethod
    def for_stage(cls, stage: int, gamma: float = 0.0) -> "LossWeights":
        """Default schedule: the PCM term only enters in stage 3."""
        if stage not in STAGE_BETA:
            raise ConfigError(f"unknown stage {stage}")
        return cls(STAGE_BETA[stage], gamma if stage == 3 else 0.0, stage)


def loss_2d(preds: Sequence[Tensor], gts: Sequence[Tensor]) -> Tensor:
    """Squared error summed over views, divided by the per-map pixel count."""
    if len(preds) != len(gts) or not preds:
        raise ShapeError("loss_2d needs one ground-truth map per prediction")
    terms = [T.mse(p, g) for p, g in zip(preds, gts)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    # mse already divides by C*H*W; maps are single-channel so that is h*w
    return total


def loss_3d(G: Tensor, Gt: Tensor) -> Tensor:
    return T.mse(G, Gt)


def view_mask(gt_map: Tensor, threshold: float = VIEW_MASK_THRESHOLD) -> Tensor:
    return Tensor((gt_map.data > threshold).astype(gt_map.data.dtype))


def pcm(view_gt_mask: Tensor, proj_mask: Tensor, alpha: float = PCM_ALPHA) -> Tensor:
    """Fraction of ground-truth mask pixels covered by the back-projected mask.

    Differentiable in ``proj_mask``; extra coverage outside the ground-truth
    mask is free.
    """
    if view_gt_mask.shape != proj_mask.shape:
        raise ShapeError(f"pcm: shape mismatch {view_gt_mask.shape} vs {proj_mask.shape}")
    gt = view_gt_mask.detach() if view_gt_mask.requires_grad else view_gt_mask
    gt = Tensor(gt.data.astype(proj_mask.data.dtype))
    denom = float(np.abs(gt.data).sum(dtype=np.float64)) + alpha
    return T.scale(T.sum(T.mul(gt, proj_mask)), 1.0 / denom)


def loss_pcm(view_gt_masks: Sequence[Tensor], proj_masks: Sequence[Tensor], alpha: float = PCM_ALPHA) -> Tensor:
    """Sum over views of (1 - PCM)."""
    if len(view_gt_masks) != len(proj_masks) or not proj_masks:
        raise ShapeError("loss_pcm needs one projected mask per view mask")
    total = None
    for gt, pm in zip(view_gt_masks, proj_masks):
        term = T.shift(T.scale(pcm(gt, pm, alpha), -1.0), 1.0)
        total = term if total is None else T.add(total, term)
    return total


def loss_total(l3d, l2d, lpcm, w: LossWeights) -> Tensor:
    """l3d + beta * l2d + gamma * lpcm."""
    l3d, l2d, lpcm = (T.as_tensor(x, dtype=np.float64) for x in (l3d, l2d, lpcm))
    total = T.add(l3d, T.scale(l2d, w.beta))
    return T.add(total, T.scale(lpcm, w.gamma))
