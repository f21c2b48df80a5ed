import numpy as np

from mcaer import functional as F
from mcaer.gradcheck import finite_diff_check, sample_indices
from mcaer.tensor import Tensor


def test_identity_sum_has_no_error(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    assert finite_diff_check(lambda t: t.sum(), x) < 1e-7


def test_input_is_restored(rng):
    data = rng.standard_normal((2, 3))
    x = Tensor(data.copy())
    finite_diff_check(lambda t: (t * t).sum(), x)
    np.testing.assert_array_equal(x.data, data)


def test_perturbed_gradient_is_detected(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    f = lambda t: (F.sigmoid(t) * F.sigmoid(t)).sum()
    assert finite_diff_check(f, x) < 1e-5
    assert finite_diff_check(f, x, grad_hook=lambda g: g + 0.5) > 1e-2


def test_nan_is_reported(rng):
    x = Tensor(rng.standard_normal(3))
    error = finite_diff_check(lambda t: t.sum() * float("nan"), x)
    assert np.isnan(error)


def test_sample_indices_are_sorted_and_unique(rng):
    picked = sample_indices(100, 10, rng)
    assert len(set(picked.tolist())) == 10
    assert picked.tolist() == sorted(picked.tolist())
    assert sample_indices(5, 10, rng).tolist() == [0, 1, 2, 3, 4]
