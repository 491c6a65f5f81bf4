"""Training losses: binary cross-entropy and soft Dice.

Both reduce over every pixel of the minibatch jointly. The soft Dice uses
the squared-denominator form 1 - (2*sum(p*g) + s) / (sum(p^2) + sum(g^2) + s)
with smoothing s = 1, which makes the empty-prediction/empty-truth case a
perfect score instead of a division by zero.
"""

from __future__ import annotations

import enum

import numpy as np

from .tensor import Tensor

PROB_CLAMP_LO = 1e-12
PROB_CLAMP_HI = 1.0 - 1e-12
DICE_SMOOTH = 1.0


class LossKind(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    DICE = "dice"


def _check_pair(p: Tensor, g: Tensor, op: str) -> None:
    if p.shape != g.shape:
        raise ValueError(f"{op} shape mismatch: {p.shape} vs {g.shape}")
    gd = g.data
    if not np.all((gd == 0) | (gd == 1)):
        raise ValueError(f"{op} ground truth must be binary")


def bce_loss(p: Tensor, g: Tensor) -> Tensor:
    """-mean(g*log(p) + (1-g)*log(1-p)) with p clamped away from {0, 1}."""
    _check_pair(p, g, "bce_loss")
    pc = p.clamp(PROB_CLAMP_LO, PROB_CLAMP_HI)
    term = g * pc.log() + (1.0 - g) * (1.0 - pc).log()
    return -term.mean()


def dice_loss(p: Tensor, g: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    _check_pair(p, g, "dice_loss")
    inter = (p * g).sum()
    denom = (p * p).sum() + (g * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def loss_fn(kind: LossKind):
    if kind is LossKind.CROSS_ENTROPY:
        return bce_loss
    if kind is LossKind.DICE:
        return dice_loss
    raise ValueError(f"unknown loss kind: {kind!r}")
