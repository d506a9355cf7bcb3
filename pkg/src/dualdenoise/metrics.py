"""Image quality metrics, computed in float64 regardless of input dtype.

psnr uses mean squared error accumulated at 64-bit in numpy's fixed
pairwise order, so results are reproducible bit-for-bit on a machine.
ssim is the classic single-scale measure on the luminance channel with an
11x11 Gaussian window (sigma 1.5) evaluated at valid positions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EvaluationError

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass
class MetricReport:
    """Aggregated quality numbers for one evaluated configuration."""

    psnr_db: float
    ssim: float
    count: int

    def as_row(self) -> dict:
        return {"psnr_db": self.psnr_db, "ssim": self.ssim, "count": self.count}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise EvaluationError("metric inputs contain non-finite values")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2, dtype=np.float64))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 709 luminance of a (3,H,W) or (N,3,H,W) stack."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 3 and rgb.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, rgb, axes=([0], [0]))
    if rgb.ndim == 4 and rgb.shape[1] == 3:
        return np.tensordot(rgb, LUMA_WEIGHTS, axes=([1], [0]))
    raise DimensionError(f"expected (3,H,W) or (N,3,H,W), got {rgb.shape}")


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (xs / _SSIM_SIGMA) ** 2)
    win = np.outer(g, g)
    return win / win.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.tensordot(view, win, axes=([2, 3], [0, 1]))


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale structural similarity on luminance, valid windows only.

    Color inputs are converted with the Rec. 709 weights; 2-d inputs are
    treated as already-grayscale.  Batches average over frames.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        frames = [(a, b)]
    elif a.ndim == 3 and a.shape[0] == 3:
        frames = [(luminance(a), luminance(b))]
    elif a.ndim == 4 and a.shape[1] == 3:
        la, lb = luminance(a), luminance(b)
        frames = [(la[i], lb[i]) for i in range(a.shape[0])]
    else:
        raise DimensionError(f"unsupported ssim input shape {a.shape}")

    win = _gaussian_window()
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    scores = []
    for ya, yb in frames:
        if ya.shape[0] < _SSIM_WINDOW or ya.shape[1] < _SSIM_WINDOW:
            raise DimensionError(
                f"image {ya.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} ssim window")
        mu_a = _filter_valid(ya, win)
        mu_b = _filter_valid(yb, win)
        var_a = _filter_valid(ya * ya, win) - mu_a * mu_a
        var_b = _filter_valid(yb * yb, win) - mu_b * mu_b
        cov = _filter_valid(ya * yb, win) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(float(np.mean(num / den, dtype=np.float64)))
    return float(np.mean(scores, dtype=np.float64))
