import numpy as np
import pytest

from geometry.features import DetectorParams, detect_and_describe, match_forward_backward, stack_descriptors
from geometry.motion import RigidMotion
from geometry.rgbd import CameraIntrinsics
from geometry.synth import Scene, render_depth
from geometry.volume import Plane


@pytest.fixture(scope="module")
def textured_image() -> np.ndarray:
    intrinsics = CameraIntrinsics(300.0, 300.0, 159.5, 119.5)
    scene = Scene((), Plane([0.0, 0.0, -1.0], -0.5), texture="noise", texture_scale=0.01, seed=3)
    _, gray = render_depth(scene, RigidMotion.identity(), intrinsics, (320, 240))
    return gray


def test_uniform_image_has_no_keypoints():
    assert detect_and_describe(np.full((120, 160), 0.5)) == []


def test_textured_image_yields_many_keypoints(textured_image):
    features = detect_and_describe(textured_image)
    assert len(features) >= 50
    for keypoint, descriptor in features:
        assert 0 <= keypoint.u < 320 and 0 <= keypoint.v < 240
        assert descriptor.shape == (128,)
        assert np.linalg.norm(descriptor) == pytest.approx(1.0)


def test_detection_is_deterministic(textured_image):
    first = detect_and_describe(textured_image)
    second = detect_and_describe(textured_image)
    assert [k for k, _ in first] == [k for k, _ in second]
    assert np.array_equal(stack_descriptors(first), stack_descriptors(second))


def test_integer_image_is_scaled_like_float(textured_image):
    as_uint8 = np.round(textured_image * 255).astype(np.uint8)
    assert len(detect_and_describe(as_uint8)) > 0


def test_higher_contrast_threshold_keeps_fewer(textured_image):
    loose = detect_and_describe(textured_image, DetectorParams(contrast_threshold=0.01))
    strict = detect_and_describe(textured_image, DetectorParams(contrast_threshold=0.08))
    assert len(strict) < len(loose)


def test_self_matching_is_identity(textured_image):
    descriptors = stack_descriptors(detect_and_describe(textured_image))
    matches = match_forward_backward(descriptors, descriptors, 0.7)
    assert len(matches) > 0.9 * len(descriptors)
    assert all(i == j for i, j in matches)


def test_matching_follows_permutation(textured_image, rng):
    descriptors = stack_descriptors(detect_and_describe(textured_image))
    permutation = rng.permutation(len(descriptors))
    matches = match_forward_backward(descriptors, descriptors[permutation], 0.7)
    assert len(matches) > 0.9 * len(descriptors)
    assert all(permutation[j] == i for i, j in matches)


def test_matching_respects_distance_limit():
    desc0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    desc1 = np.array([[0.9, 0.1], [-1.0, 0.0]])
    assert match_forward_backward(desc0, desc1, 0.5) == [(0, 0)]


def test_matching_empty_side():
    assert match_forward_backward(np.zeros((0, 128)), np.ones((3, 128)), 1.0) == []


def test_rejects_empty_image():
    with pytest.raises(ValueError):
        detect_and_describe(np.zeros((0, 0)))
