import numpy as np
import pytest

from latsys.core_types import InputDomainError, PartKind
from latsys.dataprep import (
    SYNTHETIC_PARTS,
    Keypoint,
    KeypointAnnotation,
    PartBox,
    SyntheticSpec,
    boxes_from_keypoints,
    crop,
    generate_synthetic,
    read_cub_part_locs,
    read_dataset,
    write_dataset,
)
from latsys.predictors import train_net_predictor


def annotation(**points):
    return KeypointAnnotation("a", {k.replace("_", " "): Keypoint(x, y, v)
                                    for k, (x, y, v) in points.items()})


def test_box_side_is_quarter_of_extent():
    ann = annotation(beak=(50, 50, True), tail=(100, 50, True))
    boxes = boxes_from_keypoints(ann, 200, 200)
    assert boxes[PartKind.BEAK].width == 12.5
    assert boxes[PartKind.BEAK].height == 12.5
    assert (boxes[PartKind.TAIL].x0 + boxes[PartKind.TAIL].x1) / 2 == 100


def test_left_eye_wins_and_legs_are_dropped():
    ann = annotation(left_eye=(10, 10, True), right_eye=(30, 10, True),
                     left_leg=(20, 80, True), crown=(20, 0, True))
    boxes = boxes_from_keypoints(ann, 100, 100, clip=False)
    eye = boxes[PartKind.EYE]
    assert (eye.x0 + eye.x1) / 2 == 10
    assert {b.part for b in boxes.values()} == {PartKind.EYE, PartKind.CROWN, PartKind.FACE}


def test_face_box_padding():
    ann = annotation(left_eye=(10, 10, True), beak=(30, 20, True))
    face = boxes_from_keypoints(ann, 100, 100)[PartKind.FACE]
    assert (face.x0, face.x1) == pytest.approx((6, 34))
    assert (face.y0, face.y1) == pytest.approx((8, 22))


def test_invisible_points_are_ignored():
    ann = annotation(beak=(50, 50, True), tail=(100, 50, False))
    assert boxes_from_keypoints(ann, 200, 200) == {}


def test_boxes_clip_to_image():
    ann = annotation(beak=(0, 0, True), tail=(40, 0, True))
    beak = boxes_from_keypoints(ann, 50, 50)[PartKind.BEAK]
    assert (beak.x0, beak.y0) == (0, 0) and beak.x1 == 5


def test_part_box_validation():
    with pytest.raises(InputDomainError):
        PartBox(PartKind.TAIL, 5, 5, 5, 10)
    with pytest.raises(InputDomainError):
        PartBox(PartKind.TAIL, 0, 0, 1, 1, "guess")
    assert PartBox(PartKind.TAIL, 60, 60, 70, 70).clipped(50, 50) is None


def test_crop_clips_and_is_idempotent():
    img = np.arange(100.0).reshape(10, 10)
    box = PartBox(PartKind.BEAK, -3, 2.5, 4, 20)
    c = crop(img, box)
    np.testing.assert_array_equal(c, img[2:, :4])
    again = crop(c, PartBox(PartKind.BEAK, 0, 0, c.shape[1], c.shape[0]))
    np.testing.assert_array_equal(again, c)
    assert crop(img, PartBox(PartKind.BEAK, 9, 0, 12, 5)) is None


def test_cub_part_locs(tmp_path):
    path = tmp_path / "part_locs.txt"
    path.write_text("1 2 10.0 20.0 1\n1 14 30.0 20.0 1\n1 5 0 0 0\n\n")
    anns = read_cub_part_locs(path, {"1": "bird.jpg"})
    vis = anns["bird.jpg"].visible()
    assert set(vis) == {"beak", "tail"} and vis["beak"] == Keypoint(10, 20, True)


def test_synthetic_is_deterministic_and_balanced():
    a = generate_synthetic(SyntheticSpec(seed=3), 80)
    b = generate_synthetic(SyntheticSpec(seed=3), 80)
    assert a.images.tobytes() == b.images.tobytes() and a.ids == b.ids
    assert np.bincount(a.labels).tolist() == [10] * 8
    assert a.images.min() >= 0 and a.images.max() <= 255
    assert not np.array_equal(a.images, generate_synthetic(SyntheticSpec(seed=4), 80).images)


def test_synthetic_boxes_contain_their_patterns():
    ds = generate_synthetic(SyntheticSpec(), 20)
    for boxes, masks in zip(ds.boxes, ds.masks):
        assert set(boxes) == set(SYNTHETIC_PARTS)
        for part, box in boxes.items():
            ys, xs = np.nonzero(masks[part])
            assert box.x0 <= xs.min() and xs.max() < box.x1
            assert box.y0 <= ys.min() and ys.max() < box.y1


def test_part_pattern_moves_with_its_box():
    spec = SyntheticSpec(noise=0)
    ds = generate_synthetic(spec, 40)
    m, P = spec.box_margin, spec.part_size

    def origin(lo, hi):
        # the margin is clipped on one side at most
        return int(lo + m) if lo > 0 else int(hi - m - P)

    for part in SYNTHETIC_PARTS:
        patches = {}
        for img, boxes, label in zip(ds.images, ds.boxes, ds.labels):
            b = boxes[part]
            y0, x0 = origin(b.y0, b.y1), origin(b.x0, b.x1)
            patches.setdefault(int(label), []).append(img[y0:y0 + P, x0:x0 + P])
        for same in patches.values():
            for p in same[1:]:
                np.testing.assert_array_equal(p, same[0])


def test_spec_validation():
    with pytest.raises(InputDomainError):
        SyntheticSpec(n_classes=0)
    with pytest.raises(InputDomainError):
        SyntheticSpec(image_size=16, part_size=10)


def test_dataset_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_classes=3), 9)
    again = read_dataset(write_dataset(ds, tmp_path / "d"))
    assert again.ids == ds.ids and again.n_classes == 3
    np.testing.assert_array_equal(again.images, ds.images)
    np.testing.assert_array_equal(again.labels, ds.labels)
    assert again.boxes == ds.boxes
    sub = ds.subset([2, 0])
    assert sub.ids == [ds.ids[2], ds.ids[0]] and sub.sample(1).label == ds.labels[0]


def test_toy_net_learns_clean_synthetic_data():
    ds = generate_synthetic(SyntheticSpec(), 600)
    model = train_net_predictor(ds.images[:480], ds.labels[:480], 8, hidden=64,
                                epochs=30, lr=0.1, seed=0)
    probs = [model.probabilities(x) for x in ds.images[480:]]
    assert np.mean(np.argmax(probs, axis=1) == ds.labels[480:]) >= 0.95
