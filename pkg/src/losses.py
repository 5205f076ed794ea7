"""Segmentation losses: soft Dice, focal, the supervised pair and VWSL.

Everything takes *probabilities* except ``supervised_loss`` and ``vwsl``,
which take the model's raw logits and apply the sigmoid themselves.

VWSL per level, with p1 = sigmoid(o1), p2 = sigmoid(o2)::

    (1 - DSC_w(p1, target)) + Focal_w(p1, target) + gamma * mean|p1 - p2|

where w = clamp(1 - 2 * std, 0, 1) weights every pixel inside the Dice sums
and as a normalized focal weight. Only o1 is scored against the surrogate
target; o2 enters through the consistency term alone.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from src.autodiff import ops
from src.autodiff.ops import ResampleMode
from src.autodiff.tensor import Tensor
from src.errors import ConfigError, LossError, ShapeError

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    smooth_eps: float = 1e-6
    vwsl_gamma: float = 1e3
    weight_clamp: bool = True

    def validate(self) -> "LossConfig":
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.smooth_eps <= 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")
        if self.vwsl_gamma < 0:
            raise ConfigError(f"vwsl_gamma must be >= 0, got {self.vwsl_gamma}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(*tensors: Tensor | None) -> None:
    present = [t for t in tensors if t is not None]
    ref = present[0].shape
    for t in present[1:]:
        if t.shape != ref:
            raise ShapeError(f"loss inputs disagree: {ref} vs {t.shape}",
                             dimension="shape", expected=ref, actual=t.shape)


def variance_weights(std: np.ndarray, clamp: bool = True) -> np.ndarray:
    """w = 1 - 2 * std, clamped to [0, 1] unless told otherwise."""
    w = 1.0 - 2.0 * np.asarray(std)
    return np.clip(w, 0.0, 1.0) if clamp else w


def downsample_target(target: Tensor, h: int, w: int) -> Tensor:
    """Bilinear downsample, then re-binarize at >= 0.5. Constant, never on the tape."""
    small = ops.resample(target.detach(), h, w, ResampleMode.BILINEAR).data
    return Tensor((small >= 0.5).astype(target.dtype))


def downsample_weights(weights: Tensor, h: int, w: int) -> Tensor:
    return Tensor(ops.resample(weights.detach(), h, w, ResampleMode.BILINEAR).data)


# --- components ---

def soft_dice(pred: Tensor, target: Tensor, weights: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Weighted soft Dice coefficient over every pixel of the batch (not the loss)."""
    _same_shape(pred, target, weights)
    if weights is None:
        inter = ops.sum(pred * target)
        pred_sum = ops.sum(pred)
        target_sum = float(target.data.sum())
    else:
        inter = ops.sum(pred * target * weights)
        pred_sum = ops.sum(pred * weights)
        target_sum = float((target.data * weights.data).sum())
    return (inter * 2.0 + eps) / (pred_sum + (target_sum + eps))


def focal_loss(pred: Tensor, target: Tensor, weights: Tensor | None = None,
               alpha: float = 1.0, gamma: float = 2.0) -> Tensor:
    """Focal loss averaged over w-weighted pixels.

    If the weights sum to zero there's nothing to normalize by, so it falls
    back to the plain mean instead of dividing by zero.
    """
    _same_shape(pred, target, weights)
    p = ops.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = p * target + (1.0 - p) * (1.0 - target)
    per_pixel = ops.pow_scalar(1.0 - p_t, gamma) * ops.log(p_t) * (-alpha)
    if weights is None:
        return ops.mean(per_pixel)
    total = float(weights.data.sum())
    if total == 0.0:
        return ops.mean(per_pixel)
    return ops.sum(per_pixel * weights) * (1.0 / total)


def consistency_l1(p1: Tensor, p2: Tensor) -> Tensor:
    """Mean absolute difference of two probability maps."""
    _same_shape(p1, p2)
    return ops.mean(ops.abs(p1 - p2))


# --- composites ---

LEVELS = ("level1", "level2")


def segmentation_term(pred: Tensor, target: Tensor, weights: Tensor | None, cfg: LossConfig) -> Tensor:
    """(1 - DSC) + Focal, optionally weighted."""
    dice = soft_dice(pred, target, weights, cfg.smooth_eps)
    focal = focal_loss(pred, target, weights, cfg.focal_alpha, cfg.focal_gamma)
    return (1.0 - dice) + focal


def supervised_loss(outputs: Mapping[str, Tensor], targets: Mapping[str, Tensor],
                    cfg: LossConfig | None = None) -> Tensor:
    """Sum over both levels of unweighted (1 - DSC) + Focal, from logits."""
    cfg = cfg or LossConfig()
    total = None
    for level in LEVELS:
        term = segmentation_term(ops.sigmoid(outputs[level]), targets[level], None, cfg)
        total = term if total is None else total + term
    return total


def vwsl(outputs: Mapping[str, tuple[Tensor, Tensor]], surrogate_target: Tensor,
         weights: Tensor | None, cfg: LossConfig | None = None) -> Tensor:
    """Variance-weighted segmentation loss from two stochastic passes.

    ``outputs[level]`` is the ``(o1, o2)`` logit pair for that level.
    ``surrogate_target`` and ``weights`` are full resolution; level-1 copies
    are bilinearly downsampled to whatever size the level-1 logits have.
    """
    cfg = cfg or LossConfig()
    if weights is None:
        raise LossError("vwsl needs variance weights; use supervised_loss for unweighted training")
    _same_shape(surrogate_target, weights)

    total = None
    for level in LEVELS:
        o1, o2 = outputs[level]
        h, w = o1.shape[2], o1.shape[3]
        if (h, w) == surrogate_target.shape[2:]:
            target, level_weights = surrogate_target, weights
        else:
            target = downsample_target(surrogate_target, h, w)
            level_weights = downsample_weights(weights, h, w)
        p1, p2 = ops.sigmoid(o1), ops.sigmoid(o2)
        term = segmentation_term(p1, target, level_weights, cfg)
        if cfg.vwsl_gamma != 0.0:
            term = term + consistency_l1(p1, p2) * cfg.vwsl_gamma
        total = term if total is None else total + term
    return total


def consistency_total(outputs: Mapping[str, tuple[Tensor, Tensor]]) -> Tensor:
    """Sum over levels of the L1 consistency term, for reporting."""
    total = None
    for level in LEVELS:
        o1, o2 = outputs[level]
        term = consistency_l1(ops.sigmoid(o1), ops.sigmoid(o2))
        total = term if total is None else total + term
    return total
