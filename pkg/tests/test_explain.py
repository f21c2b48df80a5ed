import numpy as np
import pytest

from mcaer import functional as F
from mcaer.errors import ValidationError
from mcaer.explain import cam_from_gradients, grad_cam, gradcam, upscale
from mcaer.selftest import random_inputs
from mcaer.tensor import Tensor


def toy(weights):
    activations = Tensor(np.array([[[[1.0, 3.0]], [[2.0, -1.0]]]]), requires_grad=True)
    logits = F.linear(F.global_avgpool(activations), Tensor(np.asarray(weights)))
    return logits, activations


def test_toy_model_by_hand():
    logits, activations = toy([[1.0, 0.5], [-1.0, 2.0]])
    # class 1: alpha = (-1, 2) / 2, cam = relu(-0.5 * [1, 3] + 1.0 * [2, -1]) = [1.5, 0]
    np.testing.assert_allclose(grad_cam(logits, activations, 1), [[1.0, 0.0]])
    logits, activations = toy([[1.0, 0.5], [-1.0, 2.0]])
    # class 0: alpha = (0.5, 0.25), cam = [1.0, 1.25]
    np.testing.assert_allclose(grad_cam(logits, activations, 0), [[0.8, 1.0]])


def test_disconnected_class_gives_zero_map():
    logits, activations = toy([[0.0, 0.0], [1.0, 1.0]])
    assert not grad_cam(logits, activations, 0).any()


def test_cam_from_gradients_is_nonnegative(rng):
    cam = cam_from_gradients(rng.standard_normal((4, 3, 5)), rng.standard_normal((4, 3, 5)))
    assert cam.shape == (3, 5)
    assert cam.min() >= 0.0
    assert cam.max() in (0.0, 1.0)


def test_gradcam_on_model(model, rng):
    inputs = random_inputs(model.config, 1, rng)
    model.train()
    first = gradcam(model, inputs, 3)
    second = gradcam(model, inputs, 3)
    assert first.heatmap.shape == model.config.context_map
    assert first.heatmap.min() >= 0.0
    np.testing.assert_array_equal(first.heatmap, second.heatmap)
    assert 0.0 < first.probability < 1.0
    assert model.mode == "train"
    assert all(param.grad is None for param in model.params.values())


def test_gradcam_rejects_bad_class_and_batch(model, rng):
    with pytest.raises(ValidationError):
        gradcam(model, random_inputs(model.config, 1, rng), 7)
    with pytest.raises(ValidationError):
        gradcam(model, random_inputs(model.config, 2, rng), 0)


def test_upscale():
    out = upscale(np.array([[0.0, 1.0]]), 4, 6)
    assert out.shape == (4, 6)
    np.testing.assert_allclose(out[:, 0], 0.0)
    np.testing.assert_allclose(out[:, -1], 1.0)
