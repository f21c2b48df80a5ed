import math

import numpy as np
import pytest

from mcaer import functional as F
from mcaer import rng as rngs
from mcaer.errors import DimensionError, StateError, ValidationError
from mcaer.gradcheck import finite_diff_check, sample_indices
from mcaer.selftest import EPS, OP_ELEMENTS, op_cases
from mcaer.tensor import Tensor, backward


def naive_conv(x, w, b, stride, padding):
    n, c, h, width = x.shape
    out_c, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, out_c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            window = padded[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(window, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv2d_matches_direct_loops(rng, stride, padding):
    x, w, b = rng.standard_normal((2, 3, 7, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), atol=1e-12)


def test_conv2d_shapes_and_impulse():
    out = F.conv2d(Tensor(np.zeros((1, 3, 96, 96))), Tensor(np.ones((32, 3, 3, 3))), Tensor(np.zeros(32)), 1, 1)
    assert out.shape == (1, 32, 96, 96)
    assert not out.data.any()

    impulse = np.zeros((1, 1, 3, 3))
    impulse[0, 0, 1, 1] = 1.0
    out = F.conv2d(Tensor(impulse), Tensor(np.ones((1, 1, 3, 3))), None, stride=1, padding=1)
    np.testing.assert_array_equal(out.data[0, 0], np.ones((3, 3)))


def test_conv2d_is_linear(rng):
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    x1, x2 = rng.standard_normal((1, 3, 5, 5)), rng.standard_normal((1, 3, 5, 5))
    combined = F.conv2d(Tensor(2.0 * x1 - 0.5 * x2), w, None, 1, 1).data
    separate = 2.0 * F.conv2d(Tensor(x1), w, None, 1, 1).data - 0.5 * F.conv2d(Tensor(x2), w, None, 1, 1).data
    np.testing.assert_allclose(combined, separate, atol=1e-9)


def test_conv2d_channel_mismatch_names_operands():
    with pytest.raises(DimensionError, match="conv2d: x"):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_ops_reject_empty_outputs():
    assert F.conv_output_size(4, 5, 1, 0) == 0
    with pytest.raises(DimensionError, match="larger than padded input"):
        F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 5, 5))))
    assert F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 5, 5))), padding=1).shape == (1, 1, 2, 2)
    with pytest.raises(DimensionError, match="leaves no output"):
        F.deconv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=2, padding=1)


def test_deconv2d_output_size_and_adjoint(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((3, 5, 4, 4))
    out = F.deconv2d(Tensor(x), Tensor(w), None, stride=2, padding=1)
    assert out.shape == (1, 5, 16, 16)
    assert F.deconv_output_size(8, 4, 2, 1) == 16

    # <deconv(x), y> == <x, conv(y)> with the same kernel read as [C_in, C_out]
    y = rng.standard_normal(out.shape)
    back = F.conv2d(Tensor(y), Tensor(w), None, stride=2, padding=1)
    assert np.vdot(out.data, y) == pytest.approx(np.vdot(x, back.data), rel=1e-10)


def test_batchnorm_train_and_eval():
    x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
    gamma, beta = Tensor(np.ones(1)), Tensor(np.zeros(1))
    stats = F.BatchNormStats()
    out = F.batchnorm2d(x, gamma, beta, stats, mode="train", eps=0.0)
    np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0])
    assert stats.mean.tolist() == [1.0]
    assert stats.var.tolist() == [2.0]

    out = F.batchnorm2d(x, gamma, beta, stats, mode="eval", eps=0.0)
    np.testing.assert_allclose(out.data.reshape(-1), [-1 / math.sqrt(2), 1 / math.sqrt(2)])


def test_batchnorm_constant_input_gives_beta():
    x = Tensor(np.full((3, 2, 4, 4), 5.0))
    out = F.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.array([0.5, -1.0])), None, mode="train")
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -1.0)


def test_batchnorm_eval_needs_stats():
    with pytest.raises(StateError):
        F.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), F.BatchNormStats(), "eval")


def test_pools_use_floor_semantics():
    x = Tensor(np.arange(133 * 237, dtype=np.float64).reshape(1, 1, 133, 237))
    assert F.maxpool2d(x, 2, 2).shape == (1, 1, 66, 118)
    assert F.avgpool2d(x, 2, 2).shape == (1, 1, 66, 118)
    assert F.maxpool2d(Tensor(np.ones((1, 1, 96, 96))), 2).shape == (1, 1, 48, 48)
    with pytest.raises(ValidationError):
        F.maxpool2d(Tensor(np.ones((1, 1, 1, 4))), 2)


def test_elementwise_values():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert F.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros((1, 7))), axis=1).data, np.full((1, 7), 1 / 7))


def test_softmax_is_stable_and_normalized(rng):
    x = Tensor(rng.standard_normal((5, 9)) * 300)
    out = F.softmax(x, axis=1).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(ValidationError):
        F.softmax(x, axis=2)


def test_cross_entropy_values():
    assert F.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-12)
    assert F.cross_entropy(Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(0.313262, abs=1e-6)
    assert F.cross_entropy(Tensor([[800.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValidationError):
        F.cross_entropy(Tensor(np.zeros((1, 7))), [7])


def test_fit2d_crops_and_pads_centered():
    x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(F.fit2d(x, 2, 2).data[0, 0], [[5, 6], [9, 10]])
    padded = F.fit2d(x, 6, 5).data[0, 0]
    assert padded.shape == (6, 5)
    np.testing.assert_array_equal(padded[1:5, 0:4], x.data[0, 0])
    assert padded.sum() == x.data.sum()


def test_channel_map_repeats_and_truncates():
    x = Tensor(np.arange(3, dtype=np.float64).reshape(1, 3, 1, 1))
    assert F.channel_map(x, 6).data.reshape(-1).tolist() == [0, 0, 1, 1, 2, 2]
    assert F.channel_map(x, 2).data.reshape(-1).tolist() == [0, 1]


def test_upsample_and_global_average():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    up = F.upsample_nearest(x, 2).data[0, 0]
    np.testing.assert_array_equal(up[:2, :2], np.ones((2, 2)))
    assert F.global_avgpool(x).data.tolist() == [[2.5]]


def test_linear_and_concat():
    x, w, b = Tensor(np.ones((2, 3))), Tensor(np.arange(6.0).reshape(2, 3)), Tensor(np.array([1.0, -1.0]))
    np.testing.assert_array_equal(F.linear(x, w, b).data, [[4.0, 11.0], [4.0, 11.0]])
    joined = F.concat([x, Tensor(np.zeros((2, 1)))], axis=1)
    assert joined.shape == (2, 4)
    with pytest.raises(DimensionError):
        F.linear(Tensor(np.ones((2, 4))), w)


def test_mse_masked_ignores_unselected_samples():
    pred = Tensor(np.ones((2, 1, 2, 2)), requires_grad=True)
    target = np.zeros((2, 1, 2, 2))
    loss = F.mse_masked(pred, target, np.array([True, False]))
    assert loss.item() == pytest.approx(1.0)
    backward(loss)
    assert not pred.grad[1].any()


def test_sum_gradient_is_exact(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert finite_diff_check(lambda t: t.sum(), x) < 1e-7


@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(seed):
    rng = rngs.stream(seed, "test", "op-gradients")
    for name, f, x, tolerance in op_cases(rng):
        error = finite_diff_check(f, x, eps=EPS, indices=sample_indices(x.size, OP_ELEMENTS, rng))
        assert error < tolerance, name
