import numpy as np
import pytest

from mcaer.errors import StateError
from mcaer.optim import RmsPropState, lr_at_epoch, rmsprop_step
from mcaer.tensor import ParamSet, Tensor


def scalar_params(value=1.0, grad=1.0):
    params = ParamSet()
    param = params.add("p", Tensor(np.array([value])))
    param.grad = np.array([grad])
    return params, param


def test_first_step_by_hand():
    params, param = scalar_params()
    state = RmsPropState(lr=0.1)
    rmsprop_step(params, state)
    np.testing.assert_allclose(state.acc["p"], [0.01])
    assert param.data[0] == pytest.approx(1 - 0.1 / (0.1 + 1e-8), abs=1e-12)
    assert param.data[0] == pytest.approx(1e-7, abs=1e-9)
    assert state.steps == 1


def test_zero_gradient_is_identity():
    params, param = scalar_params(grad=0.0)
    for _ in range(3):
        rmsprop_step(params, RmsPropState())
    assert param.data.tolist() == [1.0]


def test_accumulator_decays():
    params, param = scalar_params(value=0.0)
    state = RmsPropState(lr=0.0)
    rmsprop_step(params, state)
    param.grad = np.array([0.0])
    rmsprop_step(params, state)
    np.testing.assert_allclose(state.acc["p"], [0.01 * 0.99])


def test_missing_gradient_rejected():
    params = ParamSet()
    params.add("w", Tensor(np.ones(2)))
    with pytest.raises(StateError, match="w"):
        rmsprop_step(params, RmsPropState())


@pytest.mark.parametrize("epoch,lr", [(0, 4e-3), (39, 4e-3), (40, 1.6e-3), (79, 1.6e-3), (80, 6.4e-4)])
def test_step_schedule(epoch, lr):
    assert lr_at_epoch(epoch) == pytest.approx(lr)
