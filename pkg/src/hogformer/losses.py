"""Training objective: L1 reconstruction + correlation + HOG terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hog import soft_cell_histogram
from .tensor import ConfigurationError, InputValidationError, Tensor

PEARSON_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # correlation term
    beta: float = 1.0  # HOG term

    def validate(self) -> "LossWeights":
        bad = [f"{k}={v}" for k, v in (("alpha", self.alpha), ("beta", self.beta)) if not v >= 0]
        if bad:
            raise ConfigurationError("loss weights must be >= 0: " + ", ".join(bad))
        return self


@dataclass
class LossTerms:
    rec: Tensor
    cor: Tensor
    hog: Tensor
    total: Tensor

    def values(self) -> dict:
        return {
            "l_rec": self.rec.item(),
            "l_cor": self.cor.item(),
            "l_hog": self.hog.item(),
            "total": self.total.item(),
        }


def _pair(pred, gt) -> tuple[Tensor, Tensor]:
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise InputValidationError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    return pred, gt


def rec_loss(pred, gt) -> Tensor:
    """Mean absolute error."""
    pred, gt = _pair(pred, gt)
    return T.mean(T.abs_(pred - gt))


def pearson_loss(pred, gt) -> Tensor:
    """Mean over images and channels of ``1 - rho``.

    ``rho = cov / sqrt((var_p + eps) * (var_g + eps))`` over the pixels of
    one channel, so a constant channel has ``rho = 0`` and costs exactly 1.
    """
    pred, gt = _pair(pred, gt)
    if pred.ndim < 2:
        raise InputValidationError(f"pearson_loss expects (..., H, W) input, got {pred.shape}")
    axes = (-2, -1)
    pc = pred - T.mean(pred, axis=axes, keepdims=True)
    gc = gt - T.mean(gt, axis=axes, keepdims=True)
    cov = T.mean(pc * gc, axis=axes)
    var_p = T.mean(pc * pc, axis=axes)
    var_g = T.mean(gc * gc, axis=axes)
    rho = cov / T.sqrt((var_p + PEARSON_EPS) * (var_g + PEARSON_EPS))
    return T.mean(1.0 - rho)


def hog_loss(pred, gt, cell: int = 8, n_bin: int = 9) -> Tensor:
    """Mean squared difference of soft cell histograms (channel-mean gray)."""
    pred, gt = _pair(pred, gt)
    with T.no_grad():
        target = soft_cell_histogram(gt.detach(), cell, n_bin).data
    diff = soft_cell_histogram(pred, cell, n_bin) - Tensor(target)
    return T.mean(diff * diff)


def total_loss(pred, gt, w: LossWeights | None = None, cell: int = 8, n_bin: int = 9) -> LossTerms:
    """``L_rec + alpha * L_cor + beta * L_hog``.

    A zero weight removes its term from the graph; the term is still
    evaluated (without gradient) so it can be logged.
    """
    w = (w or LossWeights()).validate()
    pred, gt = _pair(pred, gt)
    rec = rec_loss(pred, gt)

    def term(fn, weight):
        if weight > 0:
            return fn()
        with T.no_grad():
            return T.Tensor(fn().data)

    cor = term(lambda: pearson_loss(pred, gt), w.alpha)
    hog = term(lambda: hog_loss(pred, gt, cell, n_bin), w.beta)
    total = rec
    if w.alpha > 0:
        total = total + w.alpha * cor
    if w.beta > 0:
        total = total + w.beta * hog
    return LossTerms(rec, cor, hog, total)


def finite_or_raise(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} is not finite ({value})")
    return value
