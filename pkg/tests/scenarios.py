"""Hand-built fusion scenarios with ground truth known by construction.

Each builder returns ``(detections, masks, num_frames, expected)`` where
``expected`` maps frame index to ``{fused_id: ground-truth object}``.
"""
from crashkit.annotation import BoundingBox
from crashkit.fusion import Detection, MaskObservation


def B(*v):
    return BoundingBox(*v)


def shift(box, dx, dy=0.0):
    return BoundingBox(box.x_min + dx, box.y_min + dy, box.x_max + dx, box.y_max + dy)


def mbox(frame, key, box):
    return MaskObservation(frame, key, box=box)


def duplicate_scenario():
    """Two detector ids fire on the identical box in every frame."""
    box = B(0.2, 0.2, 0.4, 0.5)
    dets, masks = [], []
    for f in range(3):
        dets.append(Detection(f, 1, box, 0.9, 1))
        dets.append(Detection(f, 1, box, 0.8, 2))
        masks.append(mbox(f, 50, box))
    expected = {f: {1: "car"} for f in range(3)}
    return dets, masks, 3, expected


def occlusion_scenario(redetect_class=1):
    """A car is hidden at frame 2 and comes back under a new detector id.

    A person (detector id 5) stays visible throughout. The mask of the car
    is missing while it is occluded.
    """
    car = B(0.10, 0.40, 0.30, 0.70)
    person = B(0.70, 0.30, 0.78, 0.65)
    dets, masks = [], []
    for f in range(5):
        c = shift(car, 0.02 * f)
        if f in (0, 1):
            dets.append(Detection(f, 1, c, 0.9, 4))
        elif f >= 3:
            # detector box a little larger than the mask: IoU about 0.9
            dets.append(Detection(f, redetect_class, B(c.x_min - 0.005, c.y_min - 0.005,
                                                       c.x_max + 0.005, c.y_max + 0.005), 0.9, 9))
        if f != 2:
            masks.append(mbox(f, 100, c))
        dets.append(Detection(f, 0, person, 0.9, 5))
        masks.append(mbox(f, 200, person))
    dets.sort(key=lambda d: d.frame)
    if redetect_class == 1:
        expected = {f: ({1: "car"} if f != 2 else {}) | {2: "person"} for f in range(5)}
    else:
        expected = {f: ({1: "car"} if f < 2 else {3: "truck"} if f > 2 else {}) | {2: "person"}
                    for f in range(5)}
    return dets, masks, 5, expected


def crossing_scenario():
    """Cars A (rightward) and B (leftward) cross; the detector swaps their ids from frame 3."""
    dets, masks = [], []
    expected = {}
    for f in range(6):
        a = B(0.10 + 0.15 * f, 0.20, 0.20 + 0.15 * f, 0.40)
        b = B(0.85 - 0.15 * f, 0.50, 0.95 - 0.15 * f, 0.70)
        id_a, id_b = (1, 2) if f < 3 else (2, 1)
        dets.append(Detection(f, 1, a, 0.9, id_a))
        dets.append(Detection(f, 1, b, 0.9, id_b))
        masks.append(mbox(f, 10, a))
        masks.append(mbox(f, 20, b))
        expected[f] = {1: "A", 2: "B"}
    return dets, masks, 6, expected


def late_detection_scenario():
    """Detector finds a car only from frame 16; its mask is tracked from frame 11."""
    dets, masks = [], []
    start = B(0.30, 0.40, 0.45, 0.60)
    for f in range(25):
        box = shift(start, 0.01 * (f - 11))
        if f >= 11:
            masks.append(mbox(f, 7, box))
        if f >= 16:
            dets.append(Detection(f, 1, box, 0.95, 3))
    return dets, masks, 25, {f: {1: "car"} for f in range(11, 25)}


def observed_ids(ann):
    return {f: sorted(lab.track_id for lab in fr.labels) for f, fr in enumerate(ann.data)}


def assignment_consistent(ann, expected):
    """Brute-force check: one fixed bijection fused id -> object explains every frame."""
    from itertools import permutations

    fused = sorted({lab.track_id for fr in ann.data for lab in fr.labels})
    objects = sorted({o for m in expected.values() for o in m.values()})
    if len(fused) != len(objects):
        return False
    for perm in permutations(objects):
        mapping = dict(zip(fused, perm))
        if all(sorted(mapping[lab.track_id] for lab in ann.data[f].labels) == sorted(expected[f].values())
               for f in range(len(ann.data))):
            return True
    return False
