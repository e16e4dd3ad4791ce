import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings

from crashkit.annotation import (
    CLASS_IDS, DADA_TO_CRASH, AnnotationError, BoundingBox, CrashType, FrameAnnotation, ObjectLabel,
    UnmappedCrashCode, VideoAnnotation, VideoMetadata, annotation_to_dict, empty_annotation,
    map_dada_to_crash_type, parse_annotation, serialize_annotation, validate_annotation,
)

from conftest import annotations, fixture_annotation

# crash-type table rows, written out independently of the library
TABLE_ROWS = {
    1: [13, 14, 15, 16, 17, 18, 61, 62],
    2: list(range(1, 13)),
    3: list(range(19, 38)) + [39, 41, 42, 44],
    4: [38, 40, 43] + list(range(45, 52)),
}


def test_class_taxonomy_pinned():
    assert CLASS_IDS == {"person": 0, "car": 1, "truck": 2, "bus": 3, "train": 4,
                         "motorcycle": 5, "bicycle": 6}


def test_crash_type_names():
    assert [c.label for c in CrashType] == [
        "none", "ego-only", "ego/vehicle", "vehicle-only", "vehicle/vehicle"]


@pytest.mark.parametrize("row,codes", sorted(TABLE_ROWS.items()))
def test_mapping_rows(row, codes):
    for c in codes:
        assert map_dada_to_crash_type(c) == row


@pytest.mark.parametrize("code,expected", [(5, 2), (38, 4), (13, 1)])
def test_mapping_examples(code, expected):
    assert map_dada_to_crash_type(code) == expected


@pytest.mark.parametrize("code", list(range(52, 61)))
def test_unlisted_codes_error(code):
    with pytest.raises(UnmappedCrashCode):
        map_dada_to_crash_type(code)


@pytest.mark.parametrize("bad", [0, 63, -1])
def test_out_of_range_code(bad):
    with pytest.raises(ValueError):
        map_dada_to_crash_type(bad)


def test_mapping_is_function_and_covers_table():
    listed = [c for codes in TABLE_ROWS.values() for c in codes]
    assert len(listed) == len(set(listed))
    assert set(DADA_TO_CRASH) == set(listed)


def test_training_split_counts_replayed():
    # synthetic label files distributed like the training split
    counts = {0: 1745, 1: 267, 2: 3182, 3: 577, 4: 2168}
    rng = np.random.default_rng(0)
    codes = []
    for row, n in counts.items():
        if row == 0:
            codes += [None] * n
        else:
            codes += list(rng.choice(TABLE_ROWS[row], size=n))
    rng.shuffle(codes)
    tally = Counter(int(VideoMetadata(False, None if c is None else int(c)).crash_type) for c in codes)
    assert dict(tally) == counts


def test_parse_fixture_stem(sample_annotation):
    ann = parse_annotation(serialize_annotation(sample_annotation))
    assert ann.stem == "7_00951"
    assert ann == sample_annotation


def test_empty_data_list():
    doc = {"video_source": "a.mp4", "metadata": {"ego_involved": False}, "data": []}
    ann = parse_annotation(json.dumps(doc))
    assert len(ann) == 0
    assert json.loads(serialize_annotation(ann))["data"] == []


def _doc_with_box(box):
    return json.dumps({
        "video_source": "v.mp4", "metadata": {"ego_involved": False},
        "data": [{"image_source": "v_0000.jpg",
                  "labels": [{"track_id": 0, "name": "car", "class": 1, "box": box}]}],
    })


def test_inverted_box_rejected():
    with pytest.raises(AnnotationError) as ei:
        parse_annotation(_doc_with_box([0.2, 0.1, 0.1, 0.3]))
    assert [v.rule for v in ei.value.violations] == ["box_order"]


@pytest.mark.parametrize("text", ["{", "[]", '{"video_source": "a.mp4"}', b"\xff\xfe"])
def test_malformed_documents(text):
    with pytest.raises(AnnotationError):
        parse_annotation(text)


def test_missing_label_field():
    doc = json.loads(_doc_with_box([0, 0, 1, 1]))
    del doc["data"][0]["labels"][0]["track_id"]
    with pytest.raises(AnnotationError, match="track_id"):
        parse_annotation(json.dumps(doc))


def test_validate_valid(sample_annotation):
    assert validate_annotation(sample_annotation) == []


def test_duplicate_track_id_one_violation():
    fr = FrameAnnotation("v_0000.jpg", (ObjectLabel.of(3, "car", [0, 0, .1, .1]),
                                        ObjectLabel.of(3, "bus", [.2, .2, .3, .3])))
    v = validate_annotation(VideoAnnotation("v.mp4", VideoMetadata(False), (fr,)))
    assert [(x.frame_index, x.track_id, x.rule) for x in v] == [(0, 3, "duplicate_track_id")]


def test_range_violation():
    fr = FrameAnnotation("v_0000.jpg", (ObjectLabel.of(1, "car", [0, 0.5, 0.5, 1.2]),))
    v = validate_annotation(VideoAnnotation("v.mp4", VideoMetadata(False), (fr,)))
    assert [x.rule for x in v] == ["box_range"]


def test_other_rules():
    frames = (
        FrameAnnotation("v_0001.jpg", (ObjectLabel(-1, "car", 2, BoundingBox(0, 0, 1, 1)),)),
        FrameAnnotation("v_0000.jpg", (ObjectLabel(1, "boat", 9, BoundingBox(0, 0, 1, 1)),)),
        FrameAnnotation("w_0002.jpg"),
    )
    v = validate_annotation(VideoAnnotation("v.mp4", VideoMetadata(False, 55), frames))
    rules = sorted(x.rule for x in v)
    assert rules == sorted(["unmapped_accident_type", "track_id_negative", "class_mismatch",
                            "frame_order", "unknown_class", "image_source_stem"])


def test_extras_preserved():
    doc = json.loads(_doc_with_box([0, 0, 1, 1]))
    doc["zzz"] = {"nested": [1, 2]}
    doc["metadata"]["weather"] = "rain"
    doc["data"][0]["labels"][0]["score"] = 0.9
    ann = parse_annotation(json.dumps(doc))
    back = json.loads(serialize_annotation(ann))
    assert back["zzz"] == {"nested": [1, 2]}
    assert back["metadata"]["weather"] == "rain"
    assert back["data"][0]["labels"][0]["score"] == 0.9


def test_key_order_deterministic(sample_annotation):
    d = annotation_to_dict(sample_annotation)
    assert list(d) == ["video_source", "metadata", "data"]
    assert list(d["data"][0]["labels"][0]) == ["track_id", "name", "class", "box"]
    text = serialize_annotation(sample_annotation).decode()
    assert text.startswith('{\n  "video_source"')


def test_long_synthetic_round_trip():
    ann = fixture_annotation(1000)
    assert parse_annotation(serialize_annotation(ann)) == ann


def test_empty_annotation_names():
    ann = empty_annotation("clip.mp4", 3)
    assert [f.image_source for f in ann.data] == ["clip_0000.jpg", "clip_0001.jpg", "clip_0002.jpg"]


@settings(max_examples=200, deadline=None)
@given(annotations())
def test_round_trip_property(ann):
    assert validate_annotation(ann) == []
    assert parse_annotation(serialize_annotation(ann)) == ann
