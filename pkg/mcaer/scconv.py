"""
Adaptive self-calibrated convolution with independent input (C) and output (C') widths.

The input is split channelwise. The first half goes through the self-calibration
branch: a pooled, convolved and upsampled copy of itself forms a sigmoid gate that
modulates a 3x3 transform, followed by a refinement conv. The second half goes through
a plain conv. Both halves produce C'/2 channels, so C' is free of the C' == C
restriction of the original block.
"""
import logging
from dataclasses import dataclass

import numpy as np

from mcaer import functional as F
from mcaer.errors import ConfigError, DimensionError
from mcaer.tensor import DEFAULT_DTYPE, ParamSet, Tensor, he_uniform, zeros

logger = logging.getLogger(__name__)

BANKS = ("k1", "k2", "k3", "k4")


def default_pool_rate(height: int, width: int) -> int:
    return 4 if min(height, width) >= 8 else 2


@dataclass
class ScConvConfig:
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_rate: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.c_in % 2 or self.c_out % 2:
            raise ConfigError(f'scconv channels must be even, got C={self.c_in} C\'={self.c_out}')
        if self.c_in < 2 or self.c_out < 2:
            raise ConfigError('scconv needs at least 2 input and output channels')
        if self.kernel % 2 == 0:
            raise ConfigError(f'scconv kernel must be odd, got {self.kernel}')
        if self.pool_rate < 1:
            raise ConfigError(f'scconv pool rate must be >= 1, got {self.pool_rate}')
        if self.stride < 1:
            raise ConfigError(f'scconv stride must be >= 1, got {self.stride}')

    def bank_shapes(self):
        half_in, half_out, k = self.c_in // 2, self.c_out // 2, self.kernel
        return {
            "k1": (half_out, half_in, k, k),
            "k2": (half_in, half_in, k, k),
            "k3": (half_out, half_in, k, k),
            "k4": (half_out, half_out, k, k),
        }


class ScConvParams:
    """
    The four kernel banks K1..K4 with their biases.
    """

    def __init__(self, weights, biases):
        self.weights = weights
        self.biases = biases

    def __repr__(self):
        shapes = ' '.join(f'{bank}={list(self.weights[bank].shape)}' for bank in BANKS)
        return f'<ScConvParams {shapes}>'

    def register(self, params: ParamSet, prefix: str):
        for bank in BANKS:
            params.add(f'{prefix}.{bank}.weight', self.weights[bank])
            params.add(f'{prefix}.{bank}.bias', self.biases[bank])

    @classmethod
    def from_params(cls, params: ParamSet, prefix: str):
        return cls(
            {bank: params[f'{prefix}.{bank}.weight'] for bank in BANKS},
            {bank: params[f'{prefix}.{bank}.bias'] for bank in BANKS},
        )


def build_scconv(config: ScConvConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> ScConvParams:
    config.validate()
    weights, biases = {}, {}
    for bank, shape in config.bank_shapes().items():
        fan_in = shape[1] * shape[2] * shape[3]
        weights[bank] = he_uniform(shape, fan_in, rng, dtype=dtype)
        weights[bank].requires_grad = True
        biases[bank] = zeros((shape[0],), dtype=dtype)
        biases[bank].requires_grad = True
    return ScConvParams(weights, biases)


def scconv_forward(x: Tensor, params: ScConvParams, config: ScConvConfig) -> Tensor:
    config.validate()
    if x.ndim != 4 or x.shape[1] != config.c_in:
        raise DimensionError(f'scconv: x{list(x.shape)} does not have {config.c_in} channels')
    height, width = x.shape[2:]
    rate = config.pool_rate
    if height < rate or width < rate:
        raise ConfigError(f'scconv: input {height}x{width} smaller than pool rate {rate}')

    half = config.c_in // 2
    x1, x2 = x[:, :half], x[:, half:]
    w, b = params.weights, params.biases
    conv = lambda t, bank: F.conv2d(t, w[bank], b[bank], stride=1, padding=config.padding)

    # self-calibration: the gate lives in input space, then follows K3 onto C'/2 channels
    low = F.avgpool2d(x1, rate, rate)
    calibration = F.fit2d(F.upsample_nearest(conv(low, "k2"), rate), height, width)
    gate = F.channel_map(F.sigmoid(x1 + calibration), config.c_out // 2)
    y1 = F.conv2d(conv(x1, "k3") * gate, w["k4"], b["k4"], stride=config.stride, padding=config.padding)

    y2 = F.conv2d(x2, w["k1"], b["k1"], stride=config.stride, padding=config.padding)
    return F.concat([y1, y2], axis=1)
