"""Image quality metrics.

PSNR and SSIM are computed here; LPIPS needs a pretrained perceptual
network so it is only ever accepted as an externally supplied scalar.
The summary score is the geometric mean of 10^(-PSNR/10), sqrt(1-SSIM)
and LPIPS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _as_image_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ShapeError(f"expected (H, W) or (H, W, C) images, got {a.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images have zero error; that case returns inf rather
    than raising.
    """
    a, b = _as_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter(channel: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    padded = np.pad(channel, half, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(windows, _KERNEL, axes=([2, 3], [0, 1]))


def ssim(a, b) -> float:
    """Mean structural similarity with the standard Gaussian window.

    11x11 window, sigma 1.5, C1 = 0.01^2 and C2 = 0.03^2 on the [0, 1]
    range; channel maps use reflect padding and the result averages
    over channels.
    """
    a, b = _as_image_pair(a, b)
    h, w, _ = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(
            f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x, mu_y = _filter(x), _filter(y)
        var_x = _filter(x * x) - mu_x**2
        var_y = _filter(y * y) - mu_y**2
        cov = _filter(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def avg_metric(psnr_db: float, ssim_val: float, lpips_val: float) -> float:
    """Geometric mean of 10^(-PSNR/10), sqrt(1 - SSIM) and LPIPS.

    Lower is better. A perfect SSIM or infinite PSNR collapses the
    product to zero.
    """
    if not -1.0 <= ssim_val <= 1.0:
        raise ContractError(f"ssim {ssim_val} outside [-1, 1]")
    if lpips_val < 0.0:
        raise ContractError(f"lpips {lpips_val} must be nonnegative")
    if ssim_val == 1.0 or math.isinf(psnr_db):
        return 0.0
    product = 10.0 ** (-psnr_db / 10.0) * math.sqrt(1.0 - ssim_val) * lpips_val
    return product ** (1.0 / 3.0)


@dataclass
class MetricReport:
    """One image comparison. avg is only defined once lpips is known."""

    psnr: float
    ssim: float
    lpips: float | None = None
    avg: float | None = None

    def __post_init__(self):
        if self.avg is not None and self.lpips is None:
            raise ContractError("avg requires an lpips value")

    def to_dict(self) -> dict:
        out = {"psnr": self.psnr if math.isfinite(self.psnr) else "inf", "ssim": self.ssim}
        if self.lpips is not None:
            out["lpips"] = self.lpips
            out["avg"] = self.avg
        return out


def compare(a, b, lpips_val: float | None = None) -> MetricReport:
    """PSNR/SSIM between two images, folding in LPIPS when supplied."""
    p = psnr(a, b)
    s = ssim(a, b)
    if lpips_val is None:
        return MetricReport(p, s)
    return MetricReport(p, s, lpips_val, avg_metric(p, s, lpips_val))
