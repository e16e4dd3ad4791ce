"""Reconcile detector tracks with segmentation masks into stable track ids.

The detector gives per-frame boxes with its own, occasionally wrong, track
ids. The segmenter gives per-frame masks for each object it follows. Fusion
walks the frames in order and, for every detection:

1. drops it if it overlaps an already accepted box by more than
   ``dup_iou_threshold``;
2. checks that a reused detector id still lands on the mask of the track it
   is bound to, and unbinds it otherwise;
3. matches unbound detections against the masks of tracks not yet seen in
   this frame, restoring the old id or opening a new track;
4. replaces the detector box with the same-frame mask box when available.

Afterwards each track is extended backwards over a few frames where its mask
is present and consistent with the first detected box.

Masks are keyed by the segmenter's own object key. A new track adopts the
unbound key whose mask best overlaps its first detection.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._io import InputError, iter_jsonl
from .annotation import (
    CLASS_NAMES,
    BoundingBox,
    FrameAnnotation,
    ObjectLabel,
    VideoAnnotation,
    VideoMetadata,
    frame_name,
)
from .metrics import iou

__all__ = [
    "Detection",
    "FusionConfig",
    "MaskIndex",
    "MaskObservation",
    "TrackFuser",
    "TrackState",
    "TrackStatus",
    "correct_id_switch",
    "fuse",
    "mask_to_box",
    "read_detections",
    "read_masks",
    "recover_early_frames",
    "reject_duplicates",
    "rle_decode",
    "rle_encode",
    "verify_redetection",
]


@dataclass(frozen=True)
class Detection:
    frame: int
    class_id: int
    box: BoundingBox
    confidence: float = 1.0
    detector_track_id: Optional[int] = None


@dataclass(frozen=True, eq=False)
class MaskObservation:
    """A segmenter mask for one object key in one frame.

    Either ``bitmap`` (a 2-D boolean array) or a precomputed tight ``box``.
    """

    frame: int
    track_id: int
    bitmap: Optional[np.ndarray] = None
    box: Optional[BoundingBox] = None

    @property
    def shape(self):
        return None if self.bitmap is None else self.bitmap.shape


@dataclass
class FusionConfig:
    dup_iou_threshold: float = 0.8
    redetect_iou_threshold: float = 0.5
    early_recovery_max_frames: int = 5
    min_recovery_confidence: float = 0.5
    refine_boxes: bool = True

    def __post_init__(self):
        for name in ("dup_iou_threshold", "redetect_iou_threshold", "min_recovery_confidence"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.early_recovery_max_frames < 0:
            raise ValueError("early_recovery_max_frames must be >= 0")

    def to_dict(self):
        return asdict(self)


class TrackStatus(str, Enum):
    ACTIVE = "active"
    LOST = "lost"
    CLOSED = "closed"


@dataclass
class TrackState:
    fused_track_id: int
    class_id: int
    boxes: dict = field(default_factory=dict)
    raw_boxes: dict = field(default_factory=dict)
    mask_key: Optional[int] = None
    first_seen: int = -1
    last_seen: int = -1
    status: TrackStatus = TrackStatus.ACTIVE
    recovered_frames: int = 0

    def observe(self, frame, box, raw_box):
        self.boxes[frame] = box
        self.raw_boxes[frame] = raw_box
        if self.first_seen < 0 or frame < self.first_seen:
            self.first_seen = frame
        self.last_seen = max(self.last_seen, frame)
        self.status = TrackStatus.ACTIVE


# --- masks ------------------------------------------------------------------

def rle_decode(size, counts):
    """Decode uncompressed COCO-style RLE (column-major, zeros first)."""
    h, w = (int(v) for v in size)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != h * w or (counts < 0).any():
        raise ValueError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T


def rle_encode(bitmap):
    flat = np.asarray(bitmap, dtype=bool).T.ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(np.asarray(bitmap).shape), "counts": counts}


def mask_to_box(m):
    """Tight normalized box around the set pixels of a mask.

    Pixel ``(x, y)`` covers ``[x/w, (x+1)/w] x [y/h, (y+1)/h]``.
    """
    if isinstance(m, MaskObservation):
        if m.bitmap is None:
            if m.box is None:
                raise ValueError("mask observation has neither bitmap nor box")
            return m.box
        m = m.bitmap
    bitmap = np.asarray(m, dtype=bool)
    if bitmap.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {bitmap.shape}")
    ys, xs = np.nonzero(bitmap)
    if xs.size == 0:
        raise ValueError("empty mask")
    h, w = bitmap.shape
    return BoundingBox(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


class MaskIndex:
    """Tight boxes of all non-empty masks keyed by ``(object key, frame)``."""

    def __init__(self, boxes=None, frame_shape=None):
        self._boxes = dict(boxes or {})
        self.frame_shape = frame_shape

    @classmethod
    def from_observations(cls, observations):
        boxes = {}
        shape = None
        for obs in observations:
            if obs.bitmap is not None:
                if shape is None:
                    shape = obs.bitmap.shape
                elif obs.bitmap.shape != shape:
                    raise ValueError(
                        f"inconsistent frame dimensions: mask for key {obs.track_id} at frame "
                        f"{obs.frame} is {obs.bitmap.shape}, expected {shape}")
                if not obs.bitmap.any():
                    continue
            boxes[(obs.track_id, obs.frame)] = mask_to_box(obs)
        return cls(boxes, shape)

    def get(self, key, frame):
        if key is None:
            return None
        return self._boxes.get((key, frame))

    def keys_in_frame(self, frame):
        return sorted(k for (k, f) in self._boxes if f == frame)

    def __len__(self):
        return len(self._boxes)


def _as_index(masks):
    if isinstance(masks, MaskIndex):
        return masks
    return MaskIndex.from_observations(masks or ())


# --- individual rules ---------------------------------------------------------

def reject_duplicates(new, accepted, cfg=None):
    """True when ``new`` overlaps any box in ``accepted`` by more than the threshold."""
    cfg = cfg or FusionConfig()
    box = new.box if isinstance(new, Detection) else new
    return any(iou(box, other) > cfg.dup_iou_threshold for other in accepted)


def _best_mask_match(det, tracks, index, cfg):
    best = None
    for tr in tracks:
        if tr.class_id != det.class_id:
            continue
        mb = index.get(tr.mask_key, det.frame)
        if mb is None:
            continue
        score = iou(det.box, mb)
        if score < cfg.redetect_iou_threshold:
            continue
        rank = (-score, tr.fused_track_id)
        if best is None or rank < best[0]:
            best = (rank, tr)
    return None if best is None else best[1]


def verify_redetection(det, lost_tracks, masks, cfg=None, fresh_id=None):
    """Fused id for a detection that arrived without a usable binding.

    Restores the id of the lost track whose same-frame mask overlaps the
    detection best (IoU at least ``redetect_iou_threshold``, same class);
    ties go to the lowest id. Otherwise returns ``fresh_id``.
    """
    cfg = cfg or FusionConfig()
    tr = _best_mask_match(det, lost_tracks, _as_index(masks), cfg)
    return fresh_id if tr is None else tr.fused_track_id


def _switch_detected(det, track, index, cfg):
    if track.class_id != det.class_id:
        return True
    mb = index.get(track.mask_key, det.frame)
    if mb is None:
        return False
    return iou(det.box, mb) < cfg.redetect_iou_threshold


def correct_id_switch(det, track, masks, cfg=None, fresh_id=None):
    """Keep ``track``'s id unless the detection misses its same-frame mask.

    A miss (IoU below ``redetect_iou_threshold``) or a class change means the
    detector reused the id for another object, and ``fresh_id`` is returned.
    With no mask to compare against, the binding is kept.
    """
    cfg = cfg or FusionConfig()
    if _switch_detected(det, track, _as_index(masks), cfg):
        return fresh_id
    return track.fused_track_id


def recover_early_frames(track, masks, cfg=None):
    """Prepend mask boxes for frames just before the first detection.

    Walks backwards from ``first_seen - 1`` for at most
    ``early_recovery_max_frames`` frames and stops at the first frame whose
    mask is missing or overlaps the following frame's box with IoU below
    ``min_recovery_confidence``. Mutates and returns ``track``.
    """
    cfg = cfg or FusionConfig()
    index = _as_index(masks)
    if track.mask_key is None or track.first_seen < 0:
        return track
    nxt = track.boxes[track.first_seen]
    frame = track.first_seen - 1
    added = 0
    while added < cfg.early_recovery_max_frames and frame >= 0:
        mb = index.get(track.mask_key, frame)
        if mb is None or iou(mb, nxt) < cfg.min_recovery_confidence:
            break
        track.boxes[frame] = mb
        track.first_seen = frame
        nxt = mb
        frame -= 1
        added += 1
    track.recovered_frames += added
    return track


# --- the full pass ----------------------------------------------------------

def _check_detections(detections):
    prev = -1
    for i, det in enumerate(detections):
        if det.frame < prev:
            raise ValueError(f"detections not sorted by frame at position {i}")
        if det.frame < 0:
            raise ValueError(f"negative frame index at position {i}")
        if not 0 <= det.class_id < len(CLASS_NAMES):
            raise ValueError(f"detection {i}: class {det.class_id} not in taxonomy")
        if not 0.0 <= det.confidence <= 1.0:
            raise ValueError(f"detection {i}: confidence {det.confidence} outside [0, 1]")
        problems = det.box.problems()
        if problems:
            raise ValueError(f"detection {i}: invalid box ({problems[0][1]})")
        prev = det.frame


def run_fusion(detections, masks, cfg=None, num_frames=None):
    """Run all fusion rules and return the tracks ordered by fused id."""
    cfg = cfg or FusionConfig()
    detections = list(detections)
    _check_detections(detections)
    index = _as_index(masks)
    if num_frames is None:
        num_frames = detections[-1].frame + 1 if detections else 0
    elif detections and detections[-1].frame >= num_frames:
        raise ValueError(f"detection at frame {detections[-1].frame} beyond {num_frames} frames")

    by_frame = {}
    for det in detections:
        by_frame.setdefault(det.frame, []).append(det)

    tracks = {}
    binding = {}  # detector id -> fused id
    next_id = 1

    for f in range(num_frames):
        dets = sorted(
            by_frame.get(f, ()),
            key=lambda d: (binding.get(d.detector_track_id) is None, -d.confidence,
                           -1 if d.detector_track_id is None else d.detector_track_id,
                           d.box.as_list()),
        )
        prev_raw = {tid: tr.raw_boxes[f - 1] for tid, tr in tracks.items()
                    if tr.last_seen == f - 1 and (f - 1) in tr.raw_boxes}
        accepted = []
        claimed = set()
        for det in dets:
            did = det.detector_track_id
            bound = binding.get(did) if did is not None else None
            comparison = accepted + [b for tid, b in prev_raw.items() if tid != bound]
            if reject_duplicates(det, comparison, cfg):
                continue
            target = None
            if bound is not None:
                tr = tracks[bound]
                if tr.fused_track_id not in claimed and not _switch_detected(det, tr, index, cfg):
                    target = tr
                else:
                    del binding[did]
            if target is None:
                candidates = [tr for tid, tr in sorted(tracks.items()) if tid not in claimed]
                target = _best_mask_match(det, candidates, index, cfg)
                if target is None:
                    target = TrackState(next_id, det.class_id,
                                        mask_key=_adopt_mask_key(det, tracks, index, cfg))
                    tracks[next_id] = target
                    next_id += 1
                if did is not None:
                    binding[did] = target.fused_track_id
            mb = index.get(target.mask_key, f)
            box = mb if (cfg.refine_boxes and mb is not None) else det.box
            target.observe(f, box, det.box)
            claimed.add(target.fused_track_id)
            accepted.append(det.box)
        for tr in tracks.values():
            tr.status = TrackStatus.ACTIVE if tr.last_seen == f else TrackStatus.LOST

    for tr in tracks.values():
        recover_early_frames(tr, index, cfg)
        tr.status = TrackStatus.CLOSED
    return [tracks[k] for k in sorted(tracks)], num_frames


def _adopt_mask_key(det, tracks, index, cfg):
    taken = {tr.mask_key for tr in tracks.values() if tr.mask_key is not None}
    best = None
    for key in index.keys_in_frame(det.frame):
        if key in taken:
            continue
        score = iou(det.box, index.get(key, det.frame))
        if score >= cfg.redetect_iou_threshold and (best is None or score > best[0]):
            best = (score, key)
    return None if best is None else best[1]


def tracks_to_annotation(tracks, num_frames, video_source, metadata=None, ext=".jpg"):
    ann = VideoAnnotation(video_source, metadata or VideoMetadata(ego_involved=False))
    stem = ann.stem
    frames = []
    for f in range(num_frames):
        labels = tuple(
            ObjectLabel(tr.fused_track_id, CLASS_NAMES[tr.class_id], tr.class_id, tr.boxes[f])
            for tr in tracks if f in tr.boxes
        )
        frames.append(FrameAnnotation(frame_name(stem, f, ext), labels))
    return VideoAnnotation(ann.video_source, ann.metadata, tuple(frames))


def fuse(detections, masks=(), cfg=None, video_source="video.mp4", metadata=None,
         num_frames=None, ext=".jpg"):
    """Fuse detections and masks of one video into a :class:`VideoAnnotation`."""
    tracks, n = run_fusion(detections, masks, cfg, num_frames)
    return tracks_to_annotation(tracks, n, video_source, metadata, ext)


class TrackFuser(BaseEstimator):
    """Estimator-style wrapper around :func:`fuse`; exposes ``tracks_`` after fitting."""

    def __init__(self, dup_iou_threshold=0.8, redetect_iou_threshold=0.5,
                 early_recovery_max_frames=5, min_recovery_confidence=0.5, refine_boxes=True):
        self.dup_iou_threshold = dup_iou_threshold
        self.redetect_iou_threshold = redetect_iou_threshold
        self.early_recovery_max_frames = early_recovery_max_frames
        self.min_recovery_confidence = min_recovery_confidence
        self.refine_boxes = refine_boxes

    def config(self):
        return FusionConfig(**self.get_params())

    def fit(self, detections, masks=(), num_frames=None):
        self.tracks_, self.n_frames_ = run_fusion(detections, masks, self.config(), num_frames)
        return self

    def transform(self, video_source="video.mp4", metadata=None, ext=".jpg"):
        return tracks_to_annotation(self.tracks_, self.n_frames_, video_source, metadata, ext)

    def fit_transform(self, detections, masks=(), num_frames=None, **kwargs):
        return self.fit(detections, masks, num_frames).transform(**kwargs)


# --- file formats -------------------------------------------------------------

def _box_field(obj, path, lineno):
    box = obj.get("box")
    if not isinstance(box, list) or len(box) != 4:
        raise InputError("'box' must be a list of 4 numbers", path, lineno)
    try:
        return BoundingBox.from_list(box)
    except (TypeError, ValueError):
        raise InputError("'box' must be a list of 4 numbers", path, lineno) from None


def _int_field(obj, key, path, lineno, required=True):
    v = obj.get(key)
    if v is None and not required:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise InputError(f"'{key}' must be an integer", path, lineno)
    return v


def read_detections(path):
    """Parse detections from JSON lines ``{frame, class, box, confidence, track_id}``."""
    out = []
    for lineno, obj in iter_jsonl(path):
        conf = obj.get("confidence", 1.0)
        if isinstance(conf, bool) or not isinstance(conf, (int, float)):
            raise InputError("'confidence' must be a number", path, lineno)
        out.append(Detection(
            frame=_int_field(obj, "frame", path, lineno),
            class_id=_int_field(obj, "class", path, lineno),
            box=_box_field(obj, path, lineno),
            confidence=float(conf),
            detector_track_id=_int_field(obj, "track_id", path, lineno, required=False),
        ))
    return out


def read_masks(path):
    """Parse masks from JSON lines.

    Each line has ``frame`` and ``track_id`` plus either
    ``"rle": {"size": [h, w], "counts": [...]}`` or a tight ``box`` with
    ``"source": "mask"``.
    """
    out = []
    for lineno, obj in iter_jsonl(path):
        frame = _int_field(obj, "frame", path, lineno)
        key = _int_field(obj, "track_id", path, lineno)
        if "rle" in obj:
            rle = obj["rle"]
            try:
                bitmap = rle_decode(rle["size"], rle["counts"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"bad RLE mask: {exc}", path, lineno) from None
            out.append(MaskObservation(frame, key, bitmap=bitmap))
        elif obj.get("source") == "mask":
            out.append(MaskObservation(frame, key, box=_box_field(obj, path, lineno)))
        else:
            raise InputError("mask line needs 'rle' or a box with \"source\": \"mask\"", path, lineno)
    return out
