import numpy as np
import pytest
from hypothesis import strategies as st

from crashkit.annotation import (
    CLASS_NAMES, BoundingBox, FrameAnnotation, ObjectLabel, VideoAnnotation, VideoMetadata, frame_name,
)


def fixture_annotation(num_frames=25):
    """Hand-built 25-frame sample: a car crossing, a person, a truck appearing at frame 10."""
    stem = "7_00951"
    frames = []
    for i in range(num_frames):
        f = i / max(num_frames - 1, 1)
        labels = [
            ObjectLabel.of(1, "car", [0.10 + 0.5 * f, 0.40, 0.30 + 0.5 * f, 0.70]),
            ObjectLabel.of(2, "person", [0.70, 0.30, 0.78, 0.65]),
        ]
        if i >= 10:
            labels.append(ObjectLabel.of(5, "truck", [0.05, 0.20, 0.45, 0.60]))
        if i % 5 == 0:
            labels.append(ObjectLabel.of(9, "bicycle", [0.0, 0.0, 1.0, 1.0]))
        frames.append(FrameAnnotation(frame_name(stem, i), tuple(labels)))
    return VideoAnnotation(f"{stem}.mp4", VideoMetadata(True, 5), tuple(frames))


@pytest.fixture
def sample_annotation():
    return fixture_annotation()


unit = st.floats(0.0, 1.0, allow_nan=False, width=64)


@st.composite
def boxes(draw):
    x = sorted([draw(unit), draw(unit)])
    y = sorted([draw(unit), draw(unit)])
    return BoundingBox(x[0], y[0], x[1], y[1])


json_scalars = st.one_of(st.none(), st.booleans(), st.integers(-10**6, 10**6),
                         st.text(max_size=5), st.floats(-1e6, 1e6, allow_nan=False))
extra_keys = st.text("abcdefgh_", min_size=1, max_size=6).map(lambda s: "x_" + s)
extras = st.dictionaries(extra_keys, json_scalars, max_size=2)


@st.composite
def annotations(draw, max_frames=6, max_labels=4):
    stem = draw(st.text("abcxyz0123456789_", min_size=1, max_size=8))
    n = draw(st.integers(0, max_frames))
    frames = []
    for i in range(n):
        ids = draw(st.lists(st.integers(0, 50), unique=True, max_size=max_labels))
        labels = tuple(
            ObjectLabel.of(t, draw(st.sampled_from(CLASS_NAMES)), draw(boxes()), **draw(extras))
            for t in ids
        )
        frames.append(FrameAnnotation(frame_name(stem, i), labels, draw(extras)))
    code = draw(st.one_of(st.none(), st.sampled_from([1, 7, 13, 20, 38, 50, 62])))
    meta = VideoMetadata(draw(st.booleans()), code, draw(extras))
    return VideoAnnotation(stem + ".mp4", meta, tuple(frames), draw(extras))


def rng_image(seed, h=32, w=32, channels=None):
    rng = np.random.default_rng(seed)
    shape = (h, w) if channels is None else (h, w, channels)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)
