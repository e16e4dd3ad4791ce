"""Render box annotations into RGB control frames.

Each box is filled with a colour derived from its track id and outlined
with a 2-pixel border in its class colour. Boxes are painted in ascending
track-id order, so higher ids win where boxes overlap.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._io import atomic_write, encode_png
from ._validation import round_half_up

__all__ = [
    "BORDER_COLORS",
    "BORDER_WIDTH",
    "ControlFrame",
    "ControlFrameRasterizer",
    "DrawRecord",
    "pack_frames",
    "unpack_frames",
    "rasterize_frame",
    "rasterize_sequence",
    "sentinel_frame",
    "track_fill_color",
    "write_pngs",
]

BORDER_WIDTH = 2
DEFAULT_SIZE = (512, 320)

# class id -> border RGB; row order follows the class taxonomy
BORDER_COLORS = {
    0: (0, 0, 255),      # person
    1: (255, 0, 0),      # car
    2: (247, 162, 44),   # truck
    3: (250, 255, 2),    # bus
    4: (0, 255, 0),      # train
    5: (204, 153, 155),  # motorcycle
    6: (255, 209, 22),   # bicycle
}

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z):
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def track_fill_color(track_id):
    """Fill colour for a track id; every channel lies in [50, 255].

    Channel ``k`` is ``50 + h_k mod 206`` where ``h_k`` is the splitmix64
    finalizer applied to ``track_id + k * golden`` for lanes ``k = 1, 2, 3``.
    """
    if track_id < 0:
        raise ValueError(f"track_id must be non-negative, got {track_id}")
    tid = int(track_id)
    return tuple(50 + _splitmix64((tid + (lane - 1) * _GOLDEN) & _MASK64) % 206
                 for lane in (1, 2, 3))


@dataclass(frozen=True)
class DrawRecord:
    track_id: int
    fill_rgb: tuple
    border_rgb: tuple
    rect: tuple  # x0, y0, x1, y1 in pixels, end-exclusive


@dataclass
class ControlFrame:
    image: Optional[np.ndarray]
    records: list = field(default_factory=list)
    masked: bool = False

    @property
    def size(self):
        return None if self.image is None else (self.image.shape[1], self.image.shape[0])


def pixel_rect(box, width, height):
    x0, x1 = (int(v) for v in np.clip(round_half_up([box.x_min * width, box.x_max * width]), 0, width))
    y0, y1 = (int(v) for v in np.clip(round_half_up([box.y_min * height, box.y_max * height]), 0, height))
    return x0, y0, x1, y1


def rasterize_frame(labels, width=DEFAULT_SIZE[0], height=DEFAULT_SIZE[1]):
    """Draw one timestep's labels onto a black ``(height, width, 3)`` canvas."""
    image = np.zeros((height, width, 3), dtype=np.uint8)
    records = []
    for lab in sorted(labels, key=lambda lab: lab.track_id):
        try:
            border = BORDER_COLORS[lab.class_id]
        except KeyError:
            raise ValueError(f"no border colour for class id {lab.class_id}") from None
        fill = track_fill_color(lab.track_id)
        x0, y0, x1, y1 = rect = pixel_rect(lab.box, width, height)
        records.append(DrawRecord(lab.track_id, fill, border, rect))
        if x1 <= x0 or y1 <= y0:
            continue
        image[y0:y1, x0:x1] = fill
        bw = BORDER_WIDTH
        image[y0:min(y0 + bw, y1), x0:x1] = border
        image[max(y1 - bw, y0):y1, x0:x1] = border
        image[y0:y1, x0:min(x0 + bw, x1)] = border
        image[y0:y1, max(x1 - bw, x0):x1] = border
    return ControlFrame(image, records)


def sentinel_frame(width=DEFAULT_SIZE[0], height=DEFAULT_SIZE[1]):
    """Uniform mid-gray frame for visualising masked timesteps."""
    return np.full((height, width, 3), 128, dtype=np.uint8)


def rasterize_sequence(ann, width=DEFAULT_SIZE[0], height=DEFAULT_SIZE[1], first_masked=None):
    """One control frame per annotated frame.

    Frames at index ``first_masked`` and later are flagged as masked and
    carry no image.
    """
    out = []
    for i, fr in enumerate(ann.data):
        if first_masked is not None and i >= first_masked:
            out.append(ControlFrame(None, [], masked=True))
        else:
            out.append(rasterize_frame(fr.labels, width, height))
    return out


def write_pngs(frames, out_dir, stem):
    """Write ``<stem>_bbox_<index:04d>.png`` for each unmasked frame."""
    out_dir = Path(out_dir)
    paths = []
    for i, fr in enumerate(frames):
        if fr.image is None:
            continue
        path = out_dir / f"{stem}_bbox_{i:04d}.png"
        atomic_write(path, encode_png(fr.image))
        paths.append(path)
    return paths


_HEADER = struct.Struct("<III")


def pack_frames(images):
    """Little-endian ``(width, height, count)`` header, then planar RGB per frame."""
    images = [np.asarray(im, dtype=np.uint8) for im in images]
    if not images:
        return _HEADER.pack(0, 0, 0)
    h, w = images[0].shape[:2]
    body = b"".join(np.ascontiguousarray(im.transpose(2, 0, 1)).tobytes() for im in images)
    return _HEADER.pack(w, h, len(images)) + body


def unpack_frames(data):
    w, h, n = _HEADER.unpack_from(data)
    planes = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if planes.size != n * 3 * h * w:
        raise ValueError(f"packed body has {planes.size} bytes, header implies {n * 3 * h * w}")
    return planes.reshape(n, 3, h, w).transpose(0, 2, 3, 1)


class ControlFrameRasterizer(TransformerMixin, BaseEstimator):
    """Transform annotations into stacks of control frames.

    ``transform`` takes a sequence of per-frame label lists (or a
    :class:`~crashkit.annotation.VideoAnnotation`) and returns a
    ``(n_frames, height, width, 3)`` uint8 array.
    """

    def __init__(self, width=DEFAULT_SIZE[0], height=DEFAULT_SIZE[1]):
        self.width = width
        self.height = height

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        frames = [fr.labels for fr in X.data] if hasattr(X, "data") else list(X)
        out = np.zeros((len(frames), self.height, self.width, 3), dtype=np.uint8)
        for i, labels in enumerate(frames):
            out[i] = rasterize_frame(labels, self.width, self.height).image
        return out
