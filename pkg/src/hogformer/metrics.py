"""Full-reference image quality: PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import InputValidationError

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if a.shape != b.shape:
        raise InputValidationError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, gt) -> float:
    """``10 log10(1 / MSE)`` for [0, 1] images; 100 dB when MSE < 1e-10."""
    a, b = _arrays(pred, gt)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    y = correlate1d(correlate1d(x, k, axis=-1, mode="constant"), k, axis=-2, mode="constant")
    h = len(k) // 2
    return y[..., h : x.shape[-2] - h, h : x.shape[-1] - h]


def ssim(pred, gt) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian window
    (sigma 1.5), averaged over channels. Accepts ``(C, H, W)`` or ``(H, W)``
    with data range 1."""
    a, b = _arrays(pred, gt)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise InputValidationError(f"ssim expects (C, H, W) or (H, W), got {a.shape}")
    if min(a.shape[-2:]) < SSIM_WIN:
        raise InputValidationError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[-2:]}")
    k = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    # population (Gaussian-weighted) moments, as in the original formulation
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).reshape(a.shape[0], -1).mean(axis=1)
    return float(per_channel.mean())


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, image_id: str, pred, gt) -> None:
        self.ids.append(image_id)
        self.psnr.append(psnr(pred, gt))
        self.ssim.append(ssim(pred, gt))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_json(self) -> dict:
        return {
            "images": [{"id": i, "psnr": p, "ssim": s} for i, p, s in zip(self.ids, self.psnr, self.ssim)],
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "count": len(self.ids),
        }
