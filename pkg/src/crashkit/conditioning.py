"""Condition triples and the training-time masking curriculum.

A :class:`ConditionSet` holds the initial image, one slot per box frame, and
the crash type. Withheld entries are replaced by :data:`NULL`, which is
never confused with a present frame that happens to contain no boxes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Any

from ._validation import check_rng
from .annotation import CrashType

__all__ = [
    "NULL",
    "NUM_FRAMES",
    "ConditionSet",
    "CurriculumState",
    "MaskPlan",
    "apply_mask",
    "plan_for_task",
    "sample_mask_plan",
]

NUM_FRAMES = 25
PREDICTION_PREFIXES = (0, 3, 9, 25)

# semantic masking: image only, crash only, both; the rest keeps both
P_IMAGE_ONLY = 0.1
P_CRASH_ONLY = 0.1
P_BOTH = 0.1


class _Null:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL"

    def __reduce__(self):
        return (_Null, ())


NULL = _Null()


@dataclass(frozen=True)
class ConditionSet:
    image: Any
    boxes: tuple
    crash_type: Any

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @classmethod
    def full(cls, image, boxes, crash_type):
        """Unmasked condition; ``crash_type`` is coerced to :class:`CrashType`."""
        return cls(image, tuple(boxes), CrashType(crash_type))

    @property
    def num_frames(self):
        return len(self.boxes)

    @property
    def image_masked(self):
        return self.image is NULL

    @property
    def crash_masked(self):
        return self.crash_type is NULL

    def box_masked(self, i):
        return self.boxes[i] is NULL

    @property
    def box_mask(self):
        return tuple(b is NULL for b in self.boxes)

    def without_boxes(self):
        return replace(self, boxes=(NULL,) * len(self.boxes))

    def without_crash(self):
        return replace(self, crash_type=NULL)

    def with_crash(self, crash_type):
        return replace(self, crash_type=CrashType(crash_type))


@dataclass(frozen=True)
class MaskPlan:
    k: int
    image_masked: bool = False
    crash_masked: bool = False

    def to_json(self):
        return json.dumps({"k": self.k, "image_masked": self.image_masked,
                           "crash_masked": self.crash_masked})

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(int(d["k"]), bool(d["image_masked"]), bool(d["crash_masked"]))


@dataclass(frozen=True)
class CurriculumState:
    progress: float

    def __post_init__(self):
        if not 0.0 <= self.progress <= 1.0:
            raise ValueError(f"progress must be in [0, 1], got {self.progress}")

    @property
    def max_mask_ratio(self):
        return self.progress

    @classmethod
    def at_step(cls, step, total_steps):
        return cls(min(max(step / total_steps, 0.0), 1.0))


def sample_mask_plan(rng, num_frames=NUM_FRAMES, curr=CurriculumState(1.0)):
    """Draw one masking decision for a training example.

    ``k`` is uniform over ``{N - floor(ratio * N), ..., N}`` where ``ratio``
    is the curriculum's current maximum mask ratio; box frames ``k`` and
    later are withheld. Image/crash masking is drawn independently of ``k``
    from the 10/10/10/70 categorical.
    """
    rng = check_rng(rng)
    lo = num_frames - math.floor(curr.max_mask_ratio * num_frames)
    k = int(rng.integers(lo, num_frames + 1))
    u = rng.random()
    if u < P_IMAGE_ONLY:
        image, crash = True, False
    elif u < P_IMAGE_ONLY + P_CRASH_ONLY:
        image, crash = False, True
    elif u < P_IMAGE_ONLY + P_CRASH_ONLY + P_BOTH:
        image, crash = True, True
    else:
        image, crash = False, False
    return MaskPlan(k, image, crash)


def apply_mask(cond, plan):
    """Copy of ``cond`` with the plan's slots replaced by :data:`NULL`."""
    n = cond.num_frames
    if not 0 <= plan.k <= n:
        raise ValueError(f"plan k={plan.k} invalid for {n} box frames")
    boxes = cond.boxes[:plan.k] + (NULL,) * (n - plan.k)
    return ConditionSet(
        image=NULL if plan.image_masked else cond.image,
        boxes=boxes,
        crash_type=NULL if plan.crash_masked else cond.crash_type,
    )


def plan_for_task(mode, prefix=None, num_frames=NUM_FRAMES):
    """Inference-time mask plan for a task mode.

    ``reconstruction`` keeps every box frame; ``prediction`` and
    ``counterfactual`` keep only the first ``prefix`` frames (one of
    0, 3, 9 or 25).
    """
    if mode == "reconstruction":
        if prefix not in (None, num_frames):
            raise ValueError("reconstruction uses the full box sequence")
        return MaskPlan(num_frames)
    if mode in ("prediction", "counterfactual"):
        if prefix is None:
            prefix = 0
        if prefix not in PREDICTION_PREFIXES:
            raise ValueError(f"box prefix must be one of {PREDICTION_PREFIXES}, got {prefix}")
        return MaskPlan(min(prefix, num_frames))
    raise ValueError(f"unknown task mode {mode!r}")
