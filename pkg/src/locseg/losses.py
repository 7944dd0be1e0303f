"""Segmentation losses: binary cross-entropy, soft Dice, the stage-1
combination and the cue-weighted stage-2 combination.

The stage-2 weights are per-voxel ``1 + cue_i`` with the cue in [0, 1], so
voxels the localization stage flagged (rightly or wrongly) count up to twice
as much.  Weighted Dice keeps the weight inside both sums, which reduces to
plain soft Dice at unit weight and stays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, astensor

__all__ = ["LossConfig", "bce", "dice_loss", "phase1_loss", "phase2_loss"]


@dataclass(frozen=True)
class LossConfig:
    """Balance and numerical-stability knobs shared by both stages."""

    lambda_: float = 1.0     # Dice weight in the stage-1 sum
    eps_bce: float = 1e-7    # probability clamp before the logs
    eps_dice: float = 1.0    # smoothing added to both Dice sums (voxels)

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda_ must be >= 0, got {self.lambda_}")
        if self.eps_bce <= 0 or self.eps_dice <= 0:
            raise ValueError("eps_bce and eps_dice must be > 0")


def _check_shapes(p: Tensor, y: Tensor, w: Tensor | None) -> None:
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    if w is not None and w.shape != p.shape:
        raise ShapeError(f"weight shape {w.shape} != prediction shape {p.shape}")


def bce(p, y, w=None, cfg: LossConfig | None = None) -> Tensor:
    """Mean over voxels of -w_i [y_i log p_i + (1-y_i) log(1-p_i)].

    The mean divides by the voxel count, not the weight sum, so a constant
    weight scales the loss linearly.
    """
    cfg = cfg or LossConfig()
    p, y = astensor(p), astensor(y)
    w = astensor(w) if w is not None else None
    _check_shapes(p, y, w)
    pc = p.clamp(cfg.eps_bce, 1.0 - cfg.eps_bce)
    ce = -(y * pc.log() + (1.0 - y) * (1.0 - pc).log())
    if w is not None:
        ce = w * ce
    return ce.mean()


def dice_loss(p, y, w=None, cfg: LossConfig | None = None,
              batch_axis: int | None = None) -> Tensor:
    """Soft Dice loss 1 - (2 sum(w p y) + eps) / (sum(w (p + y)) + eps).

    With ``batch_axis=0`` the ratio is computed per sample and averaged,
    which is how the training loops call it; the default treats the whole
    tensor as one sample.
    """
    cfg = cfg or LossConfig()
    p, y = astensor(p), astensor(y)
    w = astensor(w) if w is not None else None
    _check_shapes(p, y, w)
    if batch_axis is None:
        axes = None
    elif batch_axis == 0:
        axes = tuple(range(1, p.ndim))
    else:
        raise ValueError("batch_axis must be None or 0")
    py = p * y
    psum = p + y
    if w is not None:
        py = w * py
        psum = w * psum
    num = py.sum(axis=axes) * 2.0 + cfg.eps_dice
    den = psum.sum(axis=axes) + cfg.eps_dice
    loss = 1.0 - num / den
    return loss if axes is None else loss.mean()


def phase1_loss(p, y, cfg: LossConfig | None = None,
                batch_axis: int | None = None) -> Tensor:
    """Stage-1 objective: BCE + lambda * Dice."""
    cfg = cfg or LossConfig()
    return bce(p, y, cfg=cfg) + cfg.lambda_ * dice_loss(p, y, cfg=cfg, batch_axis=batch_axis)


def phase2_loss(p, y, cue, cfg: LossConfig | None = None,
                batch_axis: int | None = None) -> Tensor:
    """Stage-2 objective: cue-weighted BCE + cue-weighted Dice.

    ``cue`` must be voxel-aligned with the prediction and lie in [0, 1];
    the per-voxel weight is 1 + cue_i.  A cue of zeros reproduces the
    stage-1 objective at lambda = 1 exactly.
    """
    cfg = cfg or LossConfig()
    p = astensor(p)
    cue_arr = np.asarray(cue.data if hasattr(cue, "data") else cue, dtype=p.dtype.type)
    if cue_arr.shape != p.shape:
        raise ShapeError(
            f"cue shape {cue_arr.shape} misaligned with prediction {p.shape}")
    if cue_arr.size and (cue_arr.min() < 0.0 or cue_arr.max() > 1.0):
        raise ValueError("cue values must lie in [0, 1]")
    w = Tensor(1.0 + cue_arr)
    return bce(p, y, w=w, cfg=cfg) + dice_loss(p, y, w=w, cfg=cfg, batch_axis=batch_axis)
