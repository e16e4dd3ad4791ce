"""Per-video annotation schema: boxes, labels, frames and crash types.

One JSON document describes one video::

    {
      "video_source": "7_00951.mp4",
      "metadata": {"ego_involved": true, "accident_type": 5},
      "data": [
        {"image_source": "7_00951_0000.jpg",
         "labels": [{"track_id": 1, "name": "car", "class": 1,
                     "box": [0.1, 0.2, 0.3, 0.4]}]}
      ]
    }

Boxes are ``[x_min, y_min, x_max, y_max]`` fractions of the image size.
Unknown keys at any level are kept in ``extra`` and written back out.
"""
from __future__ import annotations

import json
import numbers
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import PurePath
from typing import Any, Mapping, Optional, Sequence

__all__ = [
    "AnnotationError",
    "BoundingBox",
    "CLASS_IDS",
    "CLASS_NAMES",
    "CrashType",
    "FrameAnnotation",
    "ObjectLabel",
    "UnmappedCrashCode",
    "VideoAnnotation",
    "VideoMetadata",
    "Violation",
    "map_dada_to_crash_type",
    "parse_annotation",
    "serialize_annotation",
    "validate_annotation",
]

CLASS_NAMES = ("person", "car", "truck", "bus", "train", "motorcycle", "bicycle")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}


class CrashType(IntEnum):
    NONE = 0
    EGO_ONLY = 1
    EGO_VEHICLE = 2
    VEHICLE_ONLY = 3
    VEHICLE_VEHICLE = 4

    @property
    def label(self):
        return _CRASH_LABELS[self]


_CRASH_LABELS = {
    CrashType.NONE: "none",
    CrashType.EGO_ONLY: "ego-only",
    CrashType.EGO_VEHICLE: "ego/vehicle",
    CrashType.VEHICLE_ONLY: "vehicle-only",
    CrashType.VEHICLE_VEHICLE: "vehicle/vehicle",
}

# DADA2000 accident-type codes grouped by the five-way crash type.
# Codes 52-60 have no row and are rejected.
_DADA_ROWS = {
    CrashType.EGO_ONLY: (13, 14, 15, 16, 17, 18, 61, 62),
    CrashType.EGO_VEHICLE: tuple(range(1, 13)),
    CrashType.VEHICLE_ONLY: tuple(range(19, 38)) + (39, 41, 42, 44),
    CrashType.VEHICLE_VEHICLE: (38, 40, 43) + tuple(range(45, 52)),
}
DADA_TO_CRASH = {code: ct for ct, codes in _DADA_ROWS.items() for code in codes}


class AnnotationError(ValueError):
    """Raised when an annotation document cannot be parsed or is invalid."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class UnmappedCrashCode(ValueError):
    """A DADA2000 code with no crash-type row."""


def map_dada_to_crash_type(dada_code):
    """Map a DADA2000 accident code (1-62) to its five-way crash type."""
    if isinstance(dada_code, bool) or not isinstance(dada_code, numbers.Integral):
        raise TypeError(f"DADA code must be an integer, got {dada_code!r}")
    if not 1 <= dada_code <= 62:
        raise ValueError(f"DADA code {dada_code} outside [1, 62]")
    try:
        return DADA_TO_CRASH[int(dada_code)]
    except KeyError:
        raise UnmappedCrashCode(f"DADA code {dada_code} has no crash-type mapping") from None


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @classmethod
    def from_list(cls, values):
        x_min, y_min, x_max, y_max = (float(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self):
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    def problems(self):
        """Human-readable invariant failures; empty when the box is valid."""
        out = []
        for nm in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, nm)
            if not 0.0 <= v <= 1.0:  # also catches NaN
                out.append(("box_range", f"{nm}={v} outside [0, 1]"))
        if self.x_min > self.x_max:
            out.append(("box_order", f"x_min={self.x_min} > x_max={self.x_max}"))
        if self.y_min > self.y_max:
            out.append(("box_order", f"y_min={self.y_min} > y_max={self.y_max}"))
        return out


@dataclass(frozen=True)
class ObjectLabel:
    track_id: int
    name: str
    class_id: int
    box: BoundingBox
    extra: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def of(cls, track_id, class_name, box, **extra):
        """Build a label from a taxonomy class name and a box list."""
        if not isinstance(box, BoundingBox):
            box = BoundingBox.from_list(box)
        return cls(track_id, class_name, CLASS_IDS[class_name], box, dict(extra))


@dataclass(frozen=True)
class FrameAnnotation:
    image_source: str
    labels: tuple = ()
    extra: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VideoMetadata:
    ego_involved: bool
    accident_type: Optional[int] = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def crash_type(self):
        if self.accident_type is None:
            return CrashType.NONE
        return map_dada_to_crash_type(self.accident_type)


@dataclass(frozen=True)
class VideoAnnotation:
    video_source: str
    metadata: VideoMetadata
    data: tuple = ()
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def stem(self):
        return PurePath(self.video_source).stem

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class Violation:
    frame_index: Optional[int]
    track_id: Optional[int]
    rule: str
    message: str

    def __str__(self):
        where = "video" if self.frame_index is None else f"frame {self.frame_index}"
        if self.track_id is not None:
            where += f", track {self.track_id}"
        return f"[{self.rule}] {where}: {self.message}"


def validate_annotation(ann):
    """List every invariant violation in ``ann``; an empty list means valid."""
    out = []
    meta = ann.metadata
    if meta.accident_type is not None:
        try:
            map_dada_to_crash_type(meta.accident_type)
        except (ValueError, TypeError) as exc:
            out.append(Violation(None, None, "unmapped_accident_type", str(exc)))
    stem = ann.stem
    prev_source = None
    for fi, frame in enumerate(ann.data):
        if not PurePath(frame.image_source).name.startswith(stem):
            out.append(Violation(fi, None, "image_source_stem",
                                 f"{frame.image_source!r} does not share stem {stem!r}"))
        if prev_source is not None and frame.image_source <= prev_source:
            out.append(Violation(fi, None, "frame_order",
                                 f"{frame.image_source!r} not after {prev_source!r}"))
        prev_source = frame.image_source
        seen = set()
        for lab in frame.labels:
            tid = lab.track_id
            if tid < 0:
                out.append(Violation(fi, tid, "track_id_negative", "track_id must be >= 0"))
            if tid in seen:
                out.append(Violation(fi, tid, "duplicate_track_id",
                                     f"track_id {tid} appears more than once"))
            seen.add(tid)
            expected = CLASS_IDS.get(lab.name)
            if expected is None:
                out.append(Violation(fi, tid, "unknown_class", f"class name {lab.name!r} not in taxonomy"))
            elif expected != lab.class_id:
                out.append(Violation(fi, tid, "class_mismatch",
                                     f"name {lab.name!r} implies class {expected}, got {lab.class_id}"))
            for rule, msg in lab.box.problems():
                out.append(Violation(fi, tid, rule, msg))
    return out


# --- JSON -----------------------------------------------------------------

def _require(obj, key, where):
    if not isinstance(obj, dict):
        raise AnnotationError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise AnnotationError(f"{where}: missing required field {key!r}")
    return obj[key]


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise AnnotationError(f"{where}: expected an integer, got {value!r}")
    return value


def _extras(obj, known):
    return {k: v for k, v in obj.items() if k not in known}


def _parse_label(obj, where):
    box_raw = _require(obj, "box", where)
    if (not isinstance(box_raw, list) or len(box_raw) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box_raw)):
        raise AnnotationError(f"{where}.box: expected 4 numbers, got {box_raw!r}")
    name = _require(obj, "name", where)
    if not isinstance(name, str):
        raise AnnotationError(f"{where}.name: expected a string")
    return ObjectLabel(
        track_id=_int(_require(obj, "track_id", where), f"{where}.track_id"),
        name=name,
        class_id=_int(_require(obj, "class", where), f"{where}.class"),
        box=BoundingBox.from_list(box_raw),
        extra=_extras(obj, {"track_id", "name", "class", "box"}),
    )


def _parse_frame(obj, where):
    src = _require(obj, "image_source", where)
    if not isinstance(src, str):
        raise AnnotationError(f"{where}.image_source: expected a string")
    labels = _require(obj, "labels", where)
    if not isinstance(labels, list):
        raise AnnotationError(f"{where}.labels: expected a list")
    return FrameAnnotation(
        image_source=src,
        labels=tuple(_parse_label(lab, f"{where}.labels[{i}]") for i, lab in enumerate(labels)),
        extra=_extras(obj, {"image_source", "labels"}),
    )


def annotation_from_dict(doc, validate=True):
    video_source = _require(doc, "video_source", "document")
    if not isinstance(video_source, str):
        raise AnnotationError("document.video_source: expected a string")
    meta_raw = _require(doc, "metadata", "document")
    ego = _require(meta_raw, "ego_involved", "metadata")
    if not isinstance(ego, bool):
        raise AnnotationError("metadata.ego_involved: expected a boolean")
    acc = meta_raw.get("accident_type")
    if acc is not None:
        acc = _int(acc, "metadata.accident_type")
    frames = _require(doc, "data", "document")
    if not isinstance(frames, list):
        raise AnnotationError("document.data: expected a list")
    ann = VideoAnnotation(
        video_source=video_source,
        metadata=VideoMetadata(ego, acc, _extras(meta_raw, {"ego_involved", "accident_type"})),
        data=tuple(_parse_frame(f, f"data[{i}]") for i, f in enumerate(frames)),
        extra=_extras(doc, {"video_source", "metadata", "data"}),
    )
    if validate:
        violations = validate_annotation(ann)
        if violations:
            raise AnnotationError(
                f"{len(violations)} violation(s); first: {violations[0]}", violations)
    return ann


def parse_annotation(data, validate=True):
    """Parse a UTF-8 JSON annotation document into a :class:`VideoAnnotation`.

    Raises :class:`AnnotationError` on malformed JSON, missing fields, or any
    invariant violation (unless ``validate=False``).
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AnnotationError(f"not valid UTF-8: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed JSON: {exc}") from None
    return annotation_from_dict(doc, validate=validate)


def _with_extras(known, extra):
    out = dict(known)
    for k in sorted(extra):
        out[k] = extra[k]
    return out


def annotation_to_dict(ann):
    meta = ann.metadata
    return _with_extras({
        "video_source": ann.video_source,
        "metadata": _with_extras(
            {"ego_involved": meta.ego_involved, "accident_type": meta.accident_type}, meta.extra),
        "data": [
            _with_extras({
                "image_source": fr.image_source,
                "labels": [
                    _with_extras({
                        "track_id": lab.track_id,
                        "name": lab.name,
                        "class": lab.class_id,
                        "box": lab.box.as_list(),
                    }, lab.extra)
                    for lab in fr.labels
                ],
            }, fr.extra)
            for fr in ann.data
        ],
    }, ann.extra)


def serialize_annotation(ann):
    """Encode ``ann`` as UTF-8 JSON with two-space indent and fixed key order."""
    text = json.dumps(annotation_to_dict(ann), indent=2, ensure_ascii=False, allow_nan=False)
    return (text + "\n").encode("utf-8")


def frame_name(stem, index, ext=".jpg"):
    return f"{stem}_{index:04d}{ext}"


def empty_annotation(video_source, num_frames, metadata=None, ext=".jpg"):
    """An annotation with ``num_frames`` label-free frames."""
    stem = PurePath(video_source).stem
    return VideoAnnotation(
        video_source=video_source,
        metadata=metadata or VideoMetadata(ego_involved=False),
        data=tuple(FrameAnnotation(frame_name(stem, i, ext)) for i in range(num_frames)),
    )


def labels_by_frame(ann: VideoAnnotation) -> Sequence[tuple]:
    return [fr.labels for fr in ann.data]
