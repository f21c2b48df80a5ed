import numpy as np
import pytest

from mcaer import functional as F
from mcaer import rng as rngs
from mcaer.errors import ConfigError, DimensionError
from mcaer.gradcheck import finite_diff_check
from mcaer.scconv import BANKS, ScConvConfig, build_scconv, default_pool_rate, scconv_forward
from mcaer.selftest import weighted_sum
from mcaer.tensor import ParamSet, Tensor


@pytest.mark.parametrize("c_in", [2, 4, 8])
@pytest.mark.parametrize("c_out", [2, 4, 8, 16])
def test_any_channel_widths(c_in, c_out, rng):
    config = ScConvConfig(c_in, c_out)
    params = build_scconv(config, rng)
    out = scconv_forward(Tensor(rng.standard_normal((2, c_in, 8, 8))), params, config)
    assert out.shape == (2, c_out, 8, 8)
    assert not scconv_forward(Tensor(np.zeros((1, c_in, 8, 8))), params, config).data.any()


def test_bank_shapes(rng):
    config = ScConvConfig(4, 6)
    params = build_scconv(config, rng)
    assert params.weights["k1"].shape == (3, 2, 3, 3)
    assert params.weights["k2"].shape == (2, 2, 3, 3)
    assert params.weights["k4"].shape == (3, 3, 3, 3)
    assert scconv_forward(Tensor(rng.standard_normal((1, 4, 8, 8))), params, config).shape == (1, 6, 8, 8)


def test_stride_halves_the_map(rng):
    config = ScConvConfig(4, 8, stride=2)
    out = scconv_forward(Tensor(rng.standard_normal((1, 4, 12, 12))), build_scconv(config, rng), config)
    assert out.shape == (1, 8, 6, 6)


def test_odd_channels_rejected():
    with pytest.raises(ConfigError):
        ScConvConfig(5, 6)
    with pytest.raises(ConfigError):
        ScConvConfig(4, 7)


def test_map_smaller_than_pool_rate(rng):
    config = ScConvConfig(4, 4, pool_rate=4)
    with pytest.raises(ConfigError):
        scconv_forward(Tensor(np.ones((1, 4, 3, 8))), build_scconv(config, rng), config)


def test_channel_mismatch(rng):
    config = ScConvConfig(4, 4)
    with pytest.raises(DimensionError):
        scconv_forward(Tensor(np.ones((1, 6, 8, 8))), build_scconv(config, rng), config)


def test_pool_rate_default():
    assert default_pool_rate(8, 14) == 4
    assert default_pool_rate(6, 6) == 2


def test_zero_calibration_is_half_gate(rng):
    config = ScConvConfig(4, 6)
    params = build_scconv(config, rng)
    params.weights["k2"].data[...] = 0.0
    params.biases["k3"].data[...] = rng.uniform(0.5, 1.0, 3)
    x = rng.standard_normal((1, 4, 8, 8))
    x[:, :2] = 0.0

    out = scconv_forward(Tensor(x), params, config).data
    k3_map = np.broadcast_to(params.biases["k3"].data[None, :, None, None], (1, 3, 8, 8))
    expected = F.conv2d(Tensor(0.5 * k3_map), params.weights["k4"], params.biases["k4"], 1, 1).data
    np.testing.assert_allclose(out[:, :3], expected, atol=1e-12)


def test_registered_names(rng):
    params = ParamSet()
    build_scconv(ScConvConfig(4, 4), rng).register(params, "face.block1")
    assert params.names() == [f"face.block1.{bank}.{kind}" for bank in BANKS for kind in ("weight", "bias")]


@pytest.mark.parametrize("seed", range(5))
def test_gradients(seed):
    rng = rngs.stream(seed, "test", "scconv")
    config = ScConvConfig(4, 6)
    params = build_scconv(config, rng)
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    weights = rng.standard_normal((2, 6, 8, 8))
    f = lambda _: weighted_sum(scconv_forward(x, params, config), weights)
    assert finite_diff_check(f, x) < 1e-5
    for bank in BANKS:
        assert finite_diff_check(f, params.weights[bank]) < 1e-5, bank
