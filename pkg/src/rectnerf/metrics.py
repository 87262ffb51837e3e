"""Image and depth quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from .errors import DomainError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt, mask=None) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, capped at 99 dB."""
    pred, gt = _pair(pred, gt)
    err = (pred - gt) ** 2
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    mse = float(err.mean())
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image @ LUMA if image.ndim == 3 else image


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, gt, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM over every fully-contained window of grayscale images."""
    pred, gt = _pair(to_gray(pred), to_gray(gt))
    if min(pred.shape) < size:
        raise DomainError(f"image {pred.shape} is smaller than the {size}x{size} window")
    w = gaussian_window(size, sigma)

    def filt(img):
        return fftconvolve(img, w, mode="valid")

    mu_x, mu_y = filt(pred), filt(gt)
    sxx = filt(pred * pred) - mu_x**2
    syy = filt(gt * gt) - mu_y**2
    sxy = filt(pred * gt) - mu_x * mu_y
    c1, c2 = k1**2, k2**2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim(pred, gt, **kwargs) -> float:
    return float(ssim_map(pred, gt, **kwargs).mean())


def depth_metrics(pred, gt, mask=None, thresholds=(0.01, 0.05)) -> dict:
    """Mean absolute depth error and the fraction of pixels within each threshold."""
    pred, gt = _pair(pred, gt)
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("depth mask selects no pixels")
    err = np.abs(pred - gt)[mask]
    out = {"abs_err": float(err.mean())}
    for tau in thresholds:
        out[f"acc@{tau:g}"] = float((err < tau).mean())
    return out
