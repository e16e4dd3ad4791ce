"""Frame-level image metrics and box overlap.

PSNR and SSIM operate on luma: RGB inputs are reduced with BT.601 weights
before comparison. Per-video scores are plain means over frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from ._validation import check_same_shape, to_luma

__all__ = ["MetricReport", "iou", "psnr", "ssim", "video_metric", "gaussian_window"]

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _coords(box):
    if hasattr(box, "x_min"):
        return box.x_min, box.y_min, box.x_max, box.y_max
    x0, y0, x1, y1 = box
    return float(x0), float(y0), float(x1), float(y1)


def iou(a, b):
    """Intersection over union of two ``[x_min, y_min, x_max, y_max]`` boxes.

    Accepts :class:`~crashkit.annotation.BoundingBox` or 4-sequences.
    Zero-area boxes give 0.
    """
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def psnr(a, b, peak=255.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    la, lb = to_luma(a), to_luma(b)
    check_same_shape(la, lb)
    mse = np.mean((la - lb) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, taps):
    # separable correlation, then keep only positions where the window fits
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    r = len(taps) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, data_range=255.0):
    """Mean structural similarity over all valid 11x11 window positions.

    Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03. Images must be at
    least 11 pixels on each side.
    """
    x, y = to_luma(a), to_luma(b)
    check_same_shape(x, y)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mu_x * mu_x
    syy = _filter_valid(y * y, taps) - mu_y * mu_y
    sxy = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    values: list
    video_mean: float
    n_infinite: int = 0
    metric: str = ""

    def to_csv(self):
        rows = ["frame_index,value"]
        rows += [f"{i},{_fmt(v)}" for i, v in enumerate(self.values)]
        rows.append(f"mean,{_fmt(self.video_mean)}")
        if self.n_infinite:
            rows.append(f"infinite_frames,{self.n_infinite}")
        return "\n".join(rows) + "\n"


def _fmt(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


_METRICS = {"psnr": psnr, "ssim": ssim}


def video_metric(frames_a, frames_b, metric="psnr"):
    """Score each frame pair and average over the video.

    Frames with infinite PSNR (identical pairs) are left out of the mean and
    counted in ``n_infinite``; if every frame is infinite the mean is ``inf``.
    """
    fn = _METRICS[metric] if isinstance(metric, str) else metric
    frames_a, frames_b = list(frames_a), list(frames_b)
    if len(frames_a) != len(frames_b):
        raise ValueError(f"length mismatch: {len(frames_a)} vs {len(frames_b)} frames")
    values = [float(fn(fa, fb)) for fa, fb in zip(frames_a, frames_b)]
    finite = [v for v in values if math.isfinite(v)]
    n_inf = len(values) - len(finite)
    if finite:
        mean = sum(finite) / len(finite)
    elif values:
        mean = math.inf
    else:
        mean = math.nan
    name = metric if isinstance(metric, str) else getattr(metric, "__name__", "")
    return MetricReport(values, mean, n_inf, name)
