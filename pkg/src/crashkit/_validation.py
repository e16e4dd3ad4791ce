"""Input validation helpers shared across the package."""
from __future__ import annotations

import numbers

import numpy as np

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def check_image(img, name="image", allow_gray=True, allow_rgb=True):
    """Validate an image buffer and return it as an ndarray.

    Images are ``(height, width)`` grayscale or ``(height, width, 3)`` RGB
    arrays. A trailing singleton channel axis is squeezed.
    """
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        if not allow_gray:
            raise ValueError(f"{name} must be RGB, got a single-channel image")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        if not allow_rgb:
            raise ValueError(f"{name} must be grayscale, got {arr.shape[2]} channels")
    else:
        raise ValueError(f"{name} must have shape (H, W) or (H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} has zero area: {arr.shape}")
    if not (np.issubdtype(arr.dtype, np.number) or arr.dtype == bool):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} and {names[1]} differ in shape: {a.shape} vs {b.shape}")


def to_luma(img):
    """Float luma of an image; grayscale input is returned as float64."""
    arr = check_image(img)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    return arr.astype(np.float64) @ LUMA_WEIGHTS


def check_vector_pair(*arrays, names=None):
    """Convert to float arrays and require identical shapes."""
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    names = names or [f"arg{i}" for i in range(len(out))]
    for arr, nm in zip(out[1:], names[1:]):
        if arr.shape != out[0].shape:
            raise ValueError(
                f"dimension mismatch: {names[0]} has shape {out[0].shape}, {nm} has {arr.shape}"
            )
    return out


def check_scalar(x, name, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(x, bool) or not isinstance(x, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a real number'}, got {x!r}")
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise ValueError(f"{name}={x} below allowed range")
    if hi is not None and (x > hi or (hi_open and x == hi)):
        raise ValueError(f"{name}={x} above allowed range")
    return x


def check_rng(seed):
    """Turn None, an int, or a Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def round_half_up(x):
    """Round to nearest integer, ties away from -inf (0.5 -> 1, 12.5 -> 13)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)
