"""Video curation heuristics: upscaling detection, cut detection, clip windows.

Frames are numpy arrays, ``(H, W)`` grayscale or ``(H, W, 3)`` RGB, usually
``uint8``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import LUMA_WEIGHTS, check_image, round_half_up
from .annotation import CrashType

__all__ = [
    "CLIP_LENGTH",
    "ACCIDENT_OFFSET",
    "DEFAULT_CUT_THRESHOLD",
    "ClipSpec",
    "FrameLabels",
    "ShotChangeDetector",
    "UpsizingFilter",
    "UpsizingReport",
    "content_scores",
    "detect_shot_changes",
    "estimate_upsizing_factor",
    "resize_bilinear",
    "rgb_to_hsv",
    "segment_clips",
    "subsample_fps",
    "to_grayscale",
]

CLIP_LENGTH = 25
ACCIDENT_OFFSET = 17
DEFAULT_CUT_THRESHOLD = 27.0
TARGET_SIZE = (512, 320)  # width, height
TARGET_FPS = 6


def to_grayscale(img):
    """8-bit BT.601 luma of an RGB frame; grayscale input passes through."""
    arr = check_image(img)
    if arr.ndim == 2:
        return arr
    luma = arr.astype(np.float64) @ LUMA_WEIGHTS
    return np.clip(round_half_up(luma), 0, 255).astype(np.uint8)


# --- upscaling heuristic ----------------------------------------------------

@dataclass(frozen=True)
class UpsizingReport:
    high_freq_energy: float
    normalized_energy: float
    radius: int
    factor: float


def high_frequency_mask(h, w):
    """Boolean mask of the centred spectrum that lies outside the low-pass disk.

    The disk is centred at ``(w // 2, h // 2)`` with radius
    ``min(w // 2, h // 2) // 4``; points at exactly the radius count as low.
    """
    cx, cy = w // 2, h // 2
    r = min(cx, cy) // 4
    yy, xx = np.ogrid[:h, :w]
    low = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return ~low, r


def estimate_upsizing_factor(img, spectrum=None):
    """Estimate how upscaled a grayscale frame looks from its spectrum.

    Sums the magnitude of the centred 2-D DFT outside a small low-frequency
    disk, normalizes by pixel count to get ``e``, and returns
    ``U = 1 / (1 + e)`` together with the intermediate values.

    ``spectrum`` lets a caller supply a precomputed ``fftshift(fft2(img))``.
    """
    arr = check_image(img, allow_rgb=False)
    h, w = arr.shape
    if h < 8 or w < 8:
        raise ValueError(f"image must be at least 8x8, got {w}x{h}")
    if spectrum is None:
        spectrum = np.fft.fftshift(np.fft.fft2(arr.astype(np.float64)))
    magnitude = np.abs(spectrum)
    high, r = high_frequency_mask(h, w)
    energy = float(magnitude[high].sum())
    e = energy / (h * w)
    return UpsizingReport(energy, e, r, 1.0 / (1.0 + e))


class UpsizingFilter(TransformerMixin, BaseEstimator):
    """Score frames with the spectral upsizing factor and optionally gate them.

    Parameters
    ----------
    threshold : float or None
        Frames with ``U >= threshold`` pass. ``None`` (default) only reports;
        every frame passes.
    """

    def __init__(self, threshold=None):
        self.threshold = threshold

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        """Return an ``(n_frames, 3)`` array of ``[E, e, U]`` rows."""
        rows = [self.report(frame) for frame in X]
        out = np.array([[r.high_freq_energy, r.normalized_energy, r.factor] for r in rows])
        return out.reshape(len(rows), 3)

    def report(self, frame):
        return estimate_upsizing_factor(to_grayscale(frame))

    def predict(self, X):
        """Boolean pass flags per frame."""
        factors = self.transform(X)[:, 2]
        if self.threshold is None:
            return np.ones(len(factors), dtype=bool)
        return factors >= self.threshold


# --- shot changes -------------------------------------------------------------

def rgb_to_hsv(img):
    """RGB to HSV on the 8-bit OpenCV scale: H in [0, 180), S and V in [0, 255].

    Grayscale input is treated as an RGB image with equal channels.
    """
    arr = check_image(img).astype(np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    v = arr.max(axis=2)
    mn = arr.min(axis=2)
    d = v - mn
    s = np.where(v > 0, 255.0 * d / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(d > 0, d, 1.0)
    h = np.where(v == r, 60.0 * (g - b) / safe,
                 np.where(v == g, 120.0 + 60.0 * (b - r) / safe, 240.0 + 60.0 * (r - g) / safe))
    h = np.where(d > 0, h, 0.0)
    h = np.where(h < 0, h + 360.0, h) / 2.0
    return np.stack([h, s, v], axis=2)


def content_scores(frames):
    """Mean absolute HSV difference between each pair of consecutive frames.

    Entry ``i - 1`` of the result scores the transition into frame ``i``;
    each score averages the per-channel mean differences of H, S and V.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    shape = np.asarray(frames[0]).shape
    scores = []
    prev = rgb_to_hsv(frames[0])
    for i, fr in enumerate(frames[1:], start=1):
        if np.asarray(fr).shape != shape:
            raise ValueError(f"frame {i} has shape {np.asarray(fr).shape}, expected {shape}")
        cur = rgb_to_hsv(fr)
        scores.append(float(np.abs(cur - prev).mean(axis=(0, 1)).mean()))
        prev = cur
    return np.array(scores)


def detect_shot_changes(frames, threshold=DEFAULT_CUT_THRESHOLD):
    """Indices ``i`` where frame ``i`` starts a new shot."""
    scores = content_scores(frames)
    return [int(i) + 1 for i in np.flatnonzero(scores > threshold)]


class ShotChangeDetector(BaseEstimator):
    """Content-difference cut detector with a scikit-learn style interface."""

    def __init__(self, threshold=DEFAULT_CUT_THRESHOLD):
        self.threshold = threshold

    def fit(self, X=None, y=None):
        return self

    def predict(self, frames):
        return detect_shot_changes(frames, self.threshold)

    def score_samples(self, frames):
        return content_scores(frames)


# --- clip windows -----------------------------------------------------------

@dataclass(frozen=True)
class FrameLabels:
    accident_frame: int
    abnormal_start: int
    abnormal_end: int
    crash_type: Optional[CrashType] = None

    def check(self, total_frames):
        if not (0 <= self.abnormal_start <= self.accident_frame <= self.abnormal_end < total_frames):
            raise ValueError(
                "labels inconsistent with video: need 0 <= abnormal_start <= accident_frame"
                f" <= abnormal_end < total_frames, got {self.abnormal_start}, "
                f"{self.accident_frame}, {self.abnormal_end} with {total_frames} frames")

    @classmethod
    def from_dict(cls, d):
        ct = d.get("crash_type")
        if ct is None and d.get("accident_type") is not None:
            from .annotation import map_dada_to_crash_type
            ct = map_dada_to_crash_type(d["accident_type"])
        return cls(int(d["accident_frame"]), int(d["abnormal_start"]), int(d["abnormal_end"]),
                   None if ct is None else CrashType(ct))


@dataclass(frozen=True)
class ClipSpec:
    start_frame: int
    length: int = CLIP_LENGTH
    crash_type: Optional[CrashType] = None

    @property
    def end_frame(self):
        """Last frame index, inclusive."""
        return self.start_frame + self.length - 1

    def to_json(self):
        ct = None if self.crash_type is None else int(self.crash_type)
        return json.dumps({"start_frame": self.start_frame, "end_frame": self.end_frame,
                           "length": self.length, "crash_type": ct})


def segment_clips(total_frames, labels=None, length=CLIP_LENGTH, accident_offset=ACCIDENT_OFFSET):
    """Choose the crash clip and, when possible, one no-crash clip.

    The crash window puts the accident frame at ``accident_offset`` within
    the window, shifted as needed to stay inside the video. The no-crash
    window is the earliest one that avoids ``[abnormal_start, abnormal_end]``.
    Without labels the whole video counts as normal driving. Videos shorter
    than one clip give no clips.
    """
    if total_frames < length:
        return []
    last_start = total_frames - length
    if labels is None:
        return [ClipSpec(0, length, CrashType.NONE)]
    labels.check(total_frames)
    start = min(max(labels.accident_frame - accident_offset, 0), last_start)
    clips = [ClipSpec(start, length, labels.crash_type)]
    if labels.abnormal_start >= length:
        clips.append(ClipSpec(0, length, CrashType.NONE))
    elif labels.abnormal_end + 1 <= last_start:
        clips.append(ClipSpec(labels.abnormal_end + 1, length, CrashType.NONE))
    return clips


# --- resampling -----------------------------------------------------------

def _axis_weights(n_in, n_out):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_w, out_h):
    """Bilinear resize with half-pixel centres; 8-bit input stays 8-bit."""
    arr = check_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = arr.shape[:2]
    x0, x1, fx = _axis_weights(w, out_w)
    y0, y1, fy = _axis_weights(h, out_h)
    a = arr.astype(np.float64)
    if a.ndim == 3:
        fx = fx[None, :, None]
        fy = fy[:, None, None]
    else:
        fx = fx[None, :]
        fy = fy[:, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(arr.dtype, np.integer):
        info = np.iinfo(arr.dtype)
        return np.clip(round_half_up(out), info.min, info.max).astype(arr.dtype)
    return out.astype(arr.dtype, copy=False)


def subsample_fps(n_frames, src_fps, dst_fps):
    """Source frame indices for resampling ``src_fps`` footage to ``dst_fps``.

    Index ``i`` of the output is ``round(i * src_fps / dst_fps)`` with halves
    rounded up, continuing while the index stays below ``n_frames``.
    """
    if not dst_fps > 0 or src_fps < dst_fps:
        raise ValueError(f"need src_fps >= dst_fps > 0, got {src_fps}, {dst_fps}")
    step = Fraction(src_fps) / Fraction(dst_fps)
    out = []
    i = 0
    while True:
        idx = math.floor(i * step + Fraction(1, 2))
        if idx >= n_frames:
            return out
        out.append(idx)
        i += 1
