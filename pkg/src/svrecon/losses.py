"""Supervision terms and their weighted combination.

All terms are means over their rows, so the weights do not depend on batch size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    w_3d: float = 1.0
    w_rgb: float = 0.1
    w_depth: float = 0.1
    w_normal: float = 0.01
    stage: int = 2
    stage2_start_epoch: int = 0

    def __post_init__(self):
        if min(self.w_3d, self.w_rgb, self.w_depth, self.w_normal) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.stage not in (1, 2):
            raise ContractError("stage must be 1 or 2")

    def for_epoch(self, epoch: int) -> "LossWeights":
        stage = 2 if epoch >= self.stage2_start_epoch else 1
        return LossWeights(self.w_3d, self.w_rgb, self.w_depth, self.w_normal, stage, self.stage2_start_epoch)

    def effective(self) -> tuple[float, float, float, float]:
        if self.stage == 1:
            return self.w_3d, 0.0, 0.0, 0.0
        return self.w_3d, self.w_rgb, self.w_depth, self.w_normal


def _check_rows(a: Tensor, b, op: str) -> Tensor:
    b = T._wrap(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: prediction {a.shape} vs target {b.shape}")
    if a.shape[0] == 0:
        raise ContractError(f"{op}: no rows")
    return b


def loss_3d(pred_s: Tensor, gt_s) -> Tensor:
    gt = _check_rows(pred_s, gt_s, "loss_3d")
    return T.tabs(pred_s - gt).mean()


def loss_rgb(pred: Tensor, target) -> Tensor:
    gt = _check_rows(pred, target, "loss_rgb")
    return T.tabs(pred - gt).mean()


def _masked_rows(mask, n: int, op: str) -> np.ndarray | None:
    rows = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.nonzero(rows)[0]
    if idx.size == 0:
        warnings.warn(f"{op}: empty mask, term set to 0", EmptyMaskWarning, stacklevel=3)
        return None
    return idx


def loss_depth(pred: Tensor, target, mask=None) -> Tensor:
    """Mean per-ray |D - D_hat| over supervised rays (the L2 norm of a scalar)."""
    gt = _check_rows(pred, target, "loss_depth")
    idx = _masked_rows(mask, pred.shape[0], "loss_depth")
    if idx is None:
        return Tensor(np.zeros((), dtype=pred.dtype))
    diff = T.take_rows(pred, idx) - Tensor(gt.data[idx])
    return T.tabs(diff).mean()


def loss_normal(pred: Tensor, target, mask=None, eps: float = 1e-12) -> Tensor:
    """Mean over supervised rays of ||N - N_hat||_1 + |1 - N . N_hat|, after renormalising both."""
    gt = _check_rows(pred, target, "loss_normal")
    idx = _masked_rows(mask, pred.shape[0], "loss_normal")
    if idx is None:
        return Tensor(np.zeros((), dtype=pred.dtype))
    p = T.take_rows(pred, idx)
    p = p / T.sqrt(T.clamp_min((p * p).sum(axis=1, keepdims=True), eps))
    g = gt.data[idx]
    g = g / np.sqrt(np.maximum((g * g).sum(axis=1, keepdims=True), eps))
    g = Tensor(g.astype(pred.dtype))
    l1 = T.tabs(p - g).sum(axis=1)
    cos = T.tabs(1.0 - (p * g).sum(axis=1))
    return (l1 + cos).mean()


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the ``3d``, ``rgb``, ``depth`` and ``normal`` parts.

    Stage 1 returns exactly ``w_3d * parts['3d']``; the other parts are ignored
    and may be omitted.
    """
    w3, wr, wd, wn = weights.effective()
    out = T._wrap(parts["3d"]) * w3
    if weights.stage == 2:
        for key, w in (("rgb", wr), ("depth", wd), ("normal", wn)):
            if key in parts and w != 0:
                out = out + T._wrap(parts[key]) * w
    return out
