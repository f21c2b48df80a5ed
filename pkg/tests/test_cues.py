import itertools

import numpy as np
import pytest

from mcaer.cues import (
    CueBundle,
    FaceBox,
    PersonMask,
    centered_box,
    crop_face,
    face_score,
    mask_overlap,
    occlude_face,
    remove_background,
    resolve_face,
    select_person_mask,
    select_principal_face,
)
from mcaer.errors import NoFaceError, ValidationError


def gradient_image(height=6, width=8):
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([ys / height, xs / width, (ys + xs) / (height + width)], axis=-1)


def mask_covering(shape, box: FaceBox, pixels=None):
    data = np.zeros(shape, dtype=np.uint8)
    region = data[box.y : box.y + box.h, box.x : box.x + box.w].reshape(-1)
    region[: box.area if pixels is None else pixels] = 1
    data[box.y : box.y + box.h, box.x : box.x + box.w] = region.reshape(box.h, box.w)
    return PersonMask(data)


def test_single_face_is_selected():
    box = FaceBox(3, 4, 10, 10)
    assert select_principal_face([box], 50, 50) == box


def test_larger_face_wins_at_same_center():
    small, large = FaceBox(45, 45, 10, 10), FaceBox(40, 40, 20, 20)
    assert select_principal_face([small, large], 100, 100) == large


def test_centered_small_face_beats_corner_face():
    centered, corner = FaceBox(40, 40, 20, 20), FaceBox(0, 0, 30, 30)
    assert face_score(centered, 100, 100) == pytest.approx(0.200, abs=1e-3)
    assert face_score(corner, 100, 100) == pytest.approx(-0.050, abs=1e-3)
    assert select_principal_face([corner, centered], 100, 100) == centered


def test_selection_ignores_order():
    boxes = [FaceBox(5, 5, 10, 10), FaceBox(40, 30, 12, 12), FaceBox(70, 10, 25, 25), FaceBox(30, 60, 8, 8)]
    chosen = {select_principal_face(list(order), 100, 80) for order in itertools.permutations(boxes)}
    assert len(chosen) == 1


def test_growing_a_box_raises_its_score():
    box, grown = FaceBox(40, 40, 10, 10), FaceBox(35, 35, 20, 20)
    assert face_score(grown, 120, 100) > face_score(box, 120, 100)


def test_no_boxes():
    with pytest.raises(NoFaceError):
        select_principal_face([], 10, 10)


def test_resolve_face_fallback():
    with pytest.raises(NoFaceError):
        resolve_face([], 90, 60, strict=True)
    box, fallback = resolve_face([], 90, 60, strict=False)
    assert fallback
    assert box == centered_box(90, 60)
    assert box.as_list() == [30, 20, 30, 20]


def test_resolve_face_without_selector_takes_confidence():
    near, confident = FaceBox(40, 40, 20, 20, 0.6), FaceBox(0, 0, 10, 10, 0.9)
    assert resolve_face([near, confident], 100, 100, use_selector=False) == (confident, False)
    assert resolve_face([near, confident], 100, 100, use_selector=True) == (near, False)


def test_crop_face():
    image = gradient_image()
    np.testing.assert_array_equal(crop_face(image, FaceBox(0, 0, 8, 6)), image)
    np.testing.assert_array_equal(crop_face(image, FaceBox(2, 3, 1, 1)), image[3:4, 2:3])
    np.testing.assert_array_equal(crop_face(image, FaceBox(1, 2, 4, 3)), image[2:5, 1:5])
    with pytest.raises(ValidationError):
        crop_face(image, FaceBox(6, 0, 4, 4))


def test_occlude_face():
    image = np.ones((4, 4, 3))
    occluded = occlude_face(image, FaceBox(1, 1, 2, 2))
    assert (occluded.sum(axis=-1) == 0).sum() == 4
    assert not occlude_face(image, FaceBox(0, 0, 4, 4)).any()
    np.testing.assert_array_equal(occlude_face(image, FaceBox(10, 10, 3, 3)), image)
    np.testing.assert_array_equal(occlude_face(occluded, FaceBox(1, 1, 2, 2)), occluded)
    assert image.all()


def test_covering_mask_is_selected():
    face = FaceBox(10, 10, 10, 10)
    covering = mask_covering((40, 40), face)
    disjoint = mask_covering((40, 40), FaceBox(25, 25, 10, 10))
    assert select_person_mask([disjoint, covering], face) is covering
    assert select_person_mask([disjoint], face) is None
    assert select_person_mask([], face) is None


def test_mask_overlap_by_pixel_count():
    face = FaceBox(10, 10, 10, 10)
    a, b = mask_covering((40, 40), face, pixels=60), mask_covering((40, 40), face, pixels=30)
    assert mask_overlap(a, face) == pytest.approx(0.6)
    assert mask_overlap(b, face) == pytest.approx(0.3)
    chosen = select_person_mask([b, a], face)
    assert chosen is a
    assert mask_overlap(chosen, face) >= 0.1


def test_mask_shape_mismatch():
    face = FaceBox(0, 0, 4, 4)
    with pytest.raises(ValidationError):
        select_person_mask([PersonMask(np.ones((8, 8))), PersonMask(np.ones((8, 9)))], face)


def test_remove_background():
    image = np.full((4, 6, 3), 0.7)
    np.testing.assert_array_equal(remove_background(image, PersonMask(np.ones((4, 6)))), image)
    assert not remove_background(image, PersonMask(np.zeros((4, 6)))).any()
    half = PersonMask(np.concatenate([np.ones((4, 3)), np.zeros((4, 3))], axis=1))
    once = remove_background(image, half)
    assert np.count_nonzero(once[:, :, 0]) == 12
    np.testing.assert_array_equal(remove_background(once, half), once)
    with pytest.raises(ValidationError):
        remove_background(image, PersonMask(np.ones((6, 4))))


def test_person_mask_is_binary():
    with pytest.raises(ValidationError):
        PersonMask(np.full((2, 2), 255))


def test_bundle_checks_face_and_mask():
    image = np.zeros((10, 12, 3))
    CueBundle(image, FaceBox(0, 0, 12, 10), PersonMask(np.ones((10, 12))))
    with pytest.raises(ValidationError):
        CueBundle(image, FaceBox(5, 5, 10, 10))
    with pytest.raises(ValidationError):
        CueBundle(image, FaceBox(0, 0, 4, 4), PersonMask(np.ones((12, 10))))
