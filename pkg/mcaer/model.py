"""
The three-stream emotion network.

face:    5 conv-BN-ReLU layers, max pools after the first four, global average
context: 4 conv-BN-ReLU-pool blocks, adaptive SCConv + ReLU, spatial-softmax
         attention that boosts the feature map, global average
body:    4 conv-BN-ReLU-pool blocks, 2 stride-2 deconv-BN-ReLU layers, global
         average, plus an optional 1x1 keypoint heatmap head
fusion:  a gating net per stream produces softmax weights; the weighted stream
         features are concatenated and classified

Parameters live in one ParamSet under dotted names (`face.conv1.weight`,
`fusion.gate.body.fc2.bias`); batch norm running statistics are buffers kept next
to it under the same prefixes.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mcaer import functional as F
from mcaer import rng as rngs
from mcaer.constants import (
    BODY_SIZE,
    CLASS_NAMES,
    CONTEXT_PAD,
    CONTEXT_SCALE,
    FACE_SIZE,
    NUM_CLASSES,
    REQUIRED_STREAMS,
    STREAMS,
)
from mcaer.errors import ConfigError, DimensionError
from mcaer.functional import BatchNormStats
from mcaer.scconv import ScConvConfig, ScConvParams, build_scconv, default_pool_rate, scconv_forward
from mcaer.tensor import DEFAULT_DTYPE, ParamSet, Tensor, he_uniform, ones, zeros

logger = logging.getLogger(__name__)

DECONV_KERNEL = 4


def halve(size: int, times: int) -> List[int]:
    """
    Spatial sizes after each of `times` floor-semantics 2x2 pools, input included.
    """
    trace = [size]
    for _ in range(times):
        trace.append(trace[-1] // 2)
    return trace


@dataclass
class ModelConfig:
    face_channels: Tuple[int, ...] = (32, 64, 128, 256, 256)
    context_channels: Tuple[int, ...] = (32, 64, 128, 256)
    body_channels: Tuple[int, ...] = (32, 64, 128, 256)
    feature_channels: int = 256
    gate_hidden: int = 128
    classifier_hidden: int = 128
    width_divisor: int = 1
    joints: int = 13
    face_size: int = FACE_SIZE
    context_h: int = CONTEXT_PAD[0] // CONTEXT_SCALE
    context_w: int = CONTEXT_PAD[1] // CONTEXT_SCALE
    body_size: int = BODY_SIZE
    enabled_streams: Tuple[str, ...] = STREAMS
    context_use_scconv: bool = True
    scconv_pool_rate: Optional[int] = None

    def __post_init__(self):
        self.face_channels = tuple(self.face_channels)
        self.context_channels = tuple(self.context_channels)
        self.body_channels = tuple(self.body_channels)
        self.enabled_streams = tuple(self.enabled_streams)
        self.validate()

    def validate(self):
        unknown = [stream for stream in self.enabled_streams if stream not in STREAMS]
        if unknown:
            raise ConfigError(f'unknown streams {unknown}, choose from {list(STREAMS)}')
        if len(set(self.enabled_streams)) != len(self.enabled_streams):
            raise ConfigError(f'duplicate streams in {list(self.enabled_streams)}')
        for stream in REQUIRED_STREAMS:
            if stream not in self.enabled_streams:
                raise ConfigError(f'enabled_streams must contain {stream}')
        if self.width_divisor < 1:
            raise ConfigError(f'width_divisor must be >= 1, got {self.width_divisor}')
        if len(self.face_channels) != 5:
            raise ConfigError('face stream needs 5 conv widths')
        if len(self.context_channels) != 4 or len(self.body_channels) != 4:
            raise ConfigError('context and body streams need 4 conv widths each')
        if self.joints < 0:
            raise ConfigError(f'joints must be >= 0, got {self.joints}')
        if self.scaled(self.face_channels[-1]) != self.feature_dim:
            raise ConfigError('the last face width must equal feature_channels')
        if min(self.face_map) < 1 or min(self.context_map) < 1 or self.body_size // 16 < 1:
            raise ConfigError('input sizes too small for four 2x2 pools')
        if self.context_use_scconv and min(self.context_map) < self.pool_rate:
            raise ConfigError(f'context map {self.context_map} smaller than pool rate {self.pool_rate}')

    def scaled(self, channels: int) -> int:
        return max(2, channels // self.width_divisor)

    def widths(self, channels: Sequence[int]) -> List[int]:
        return [self.scaled(c) for c in channels]

    @property
    def feature_dim(self) -> int:
        return self.scaled(self.feature_channels)

    @property
    def face_map(self) -> Tuple[int, int]:
        side = halve(self.face_size, 4)[-1]
        return side, side

    @property
    def context_map(self) -> Tuple[int, int]:
        return halve(self.context_h, 4)[-1], halve(self.context_w, 4)[-1]

    @property
    def heatmap_size(self) -> int:
        return (self.body_size // 16) * 4

    @property
    def pool_rate(self) -> int:
        return self.scconv_pool_rate or default_pool_rate(*self.context_map)

    def check_prep(self, prep):
        """
        Raise when a PrepConfig produces inputs of other sizes than this model takes.
        """
        produced = (prep.face_size, prep.context_size, prep.body_size)
        expected = (self.face_size, (self.context_h, self.context_w), self.body_size)
        if produced != expected:
            raise ConfigError(f'prep produces face/context/body sizes {produced}, the model takes {expected}')

    def for_prep(self, prep) -> "ModelConfig":
        """
        Same network with input sizes taken from a PrepConfig.
        """
        height, width = prep.context_size
        return replace(
            self, face_size=prep.face_size, context_h=height, context_w=width, body_size=prep.body_size
        )

    @property
    def streams(self) -> Tuple[str, ...]:
        # canonical order regardless of how the streams were listed
        return tuple(stream for stream in STREAMS if stream in self.enabled_streams)


@dataclass
class ModelOutput:
    logits: Tensor
    weights: Tensor
    attention: Tensor
    heatmaps: Optional[Tensor] = None
    # attention-boosted context map, the layer Grad-CAM explains
    context_activation: Optional[Tensor] = None
    features: Dict[str, Tensor] = field(default_factory=dict)

    def probabilities(self) -> np.ndarray:
        return F.softmax(self.logits.detach(), axis=1).numpy()


class MCAERModel:
    def __init__(self, config: ModelConfig, params: ParamSet, stats: Dict[str, BatchNormStats], dtype=DEFAULT_DTYPE):
        self.config = config
        self.params = params
        self.stats = stats
        self.dtype = np.dtype(dtype)
        self.mode = "eval"
        self.class_names = CLASS_NAMES
        self.metadata = {}

    def __repr__(self):
        return f'<MCAERModel streams={",".join(self.config.streams)} params={self.params.count()} mode={self.mode}>'

    def train(self) -> "MCAERModel":
        self.mode = "train"
        return self

    def eval(self) -> "MCAERModel":
        self.mode = "eval"
        return self

    def forward(self, inputs) -> ModelOutput:
        return mcaer_forward(self, inputs)

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, stats in self.stats.items():
            out[f'{prefix}.running_mean'] = stats.mean
            out[f'{prefix}.running_var'] = stats.var
        return out


# construction


def _add_conv(params, prefix, c_in, c_out, kernel, rng, dtype):
    fan_in = c_in * kernel * kernel
    params.add(f'{prefix}.weight', he_uniform((c_out, c_in, kernel, kernel), fan_in, rng, dtype=dtype))
    params.add(f'{prefix}.bias', zeros((c_out,), dtype=dtype))


def _add_deconv(params, prefix, c_in, c_out, rng, dtype):
    fan_in = c_in * DECONV_KERNEL * DECONV_KERNEL
    params.add(f'{prefix}.weight', he_uniform((c_in, c_out, DECONV_KERNEL, DECONV_KERNEL), fan_in, rng, dtype=dtype))
    params.add(f'{prefix}.bias', zeros((c_out,), dtype=dtype))


def _add_bn(params, stats, prefix, channels, dtype):
    params.add(f'{prefix}.gamma', ones((channels,), dtype=dtype))
    params.add(f'{prefix}.beta', zeros((channels,), dtype=dtype))
    stats[prefix] = BatchNormStats(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _add_linear(params, prefix, d_in, d_out, rng, dtype):
    params.add(f'{prefix}.weight', he_uniform((d_out, d_in), d_in, rng, dtype=dtype))
    params.add(f'{prefix}.bias', zeros((d_out,), dtype=dtype))


def _add_encoder(params, stats, stream, widths, rng, dtype):
    c_in = 3
    for index, c_out in enumerate(widths, start=1):
        _add_conv(params, f'{stream}.conv{index}', c_in, c_out, 3, rng, dtype)
        _add_bn(params, stats, f'{stream}.bn{index}', c_out, dtype)
        c_in = c_out
    return c_in


def context_scconv_config(config: ModelConfig) -> ScConvConfig:
    return ScConvConfig(
        c_in=config.scaled(config.context_channels[-1]),
        c_out=config.feature_dim,
        pool_rate=config.pool_rate,
    )


def add_fusion(params: ParamSet, streams: Sequence[str], config: ModelConfig, seed=0, dtype=DEFAULT_DTYPE, prefix="fusion"):
    dim, gate_hidden = config.feature_dim, config.scaled(config.gate_hidden)
    for stream in streams:
        # one generator per gate: a gate's init does not depend on which other streams exist
        gate_rng = rngs.stream(seed, "init", "gate", stream)
        _add_linear(params, f'{prefix}.gate.{stream}.fc1', dim, gate_hidden, gate_rng, dtype)
        _add_linear(params, f'{prefix}.gate.{stream}.fc2', gate_hidden, 1, gate_rng, dtype)
    rng = rngs.stream(seed, "init", "classifier")
    hidden = config.scaled(config.classifier_hidden)
    _add_linear(params, f'{prefix}.classifier.fc1', dim * len(streams), hidden, rng, dtype)
    _add_linear(params, f'{prefix}.classifier.fc2', hidden, NUM_CLASSES, rng, dtype)


def build_model(config: ModelConfig, seed=0, dtype=DEFAULT_DTYPE) -> MCAERModel:
    """
    Fresh model with He-uniform weights, unit BN scales and zero biases. Running
    statistics start at mean 0 and variance 1 so eval mode works before training.
    """
    params, stats = ParamSet(), {}

    rng = rngs.stream(seed, "init", "face")
    _add_encoder(params, stats, "face", config.widths(config.face_channels), rng, dtype)

    rng = rngs.stream(seed, "init", "context")
    c_last = _add_encoder(params, stats, "context", config.widths(config.context_channels), rng, dtype)
    if config.context_use_scconv:
        build_scconv(context_scconv_config(config), rng, dtype=dtype).register(params, "context.scconv")
    else:
        _add_conv(params, "context.conv5", c_last, config.feature_dim, 3, rng, dtype)
        _add_bn(params, stats, "context.bn5", config.feature_dim, dtype)
    _add_conv(params, "context.attention", config.feature_dim, 1, 1, rng, dtype)

    if "body" in config.enabled_streams:
        rng = rngs.stream(seed, "init", "body")
        c_last = _add_encoder(params, stats, "body", config.widths(config.body_channels), rng, dtype)
        for index in (1, 2):
            _add_deconv(params, f'body.deconv{index}', c_last, config.feature_dim, rng, dtype)
            _add_bn(params, stats, f'body.dbn{index}', config.feature_dim, dtype)
            c_last = config.feature_dim
        if config.joints:
            _add_conv(params, "body.heatmap", config.feature_dim, config.joints, 1, rng, dtype)

    add_fusion(params, config.streams, config, seed, dtype)
    model = MCAERModel(config, params, stats, dtype)
    sizes = {prefix: params.subset(prefix + '.').count() for prefix in config.streams + ("fusion",)}
    logger.info('built %s %s', model, sizes)
    return model


# forward


def _bn(model: MCAERModel, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    return F.batchnorm2d(x, p[f'{prefix}.gamma'], p[f'{prefix}.beta'], model.stats[prefix], mode=model.mode)


def _conv(model: MCAERModel, prefix: str, x: Tensor, padding=1) -> Tensor:
    p = model.params
    return F.conv2d(x, p[f'{prefix}.weight'], p[f'{prefix}.bias'], stride=1, padding=padding)


def _check_input(x: Tensor, shape: Tuple[int, ...], stream: str):
    if x.ndim != 4 or x.shape[1:] != shape:
        raise DimensionError(f'{stream} stream expects [N,{",".join(map(str, shape))}], got {list(x.shape)}')


def _as_tensor(model: MCAERModel, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=model.dtype)


def face_stream_forward(model: MCAERModel, x) -> Tensor:
    config = model.config
    x = _as_tensor(model, x)
    _check_input(x, (3, config.face_size, config.face_size), "face")
    for index in range(1, 6):
        x = F.relu(_bn(model, f'face.bn{index}', _conv(model, f'face.conv{index}', x)))
        if index < 5:
            x = F.maxpool2d(x, 2, 2)
    return F.global_avgpool(x)


def attention_map(model: MCAERModel, features: Tensor) -> Tensor:
    """
    1x1 conv down to one channel, then softmax over all spatial positions of each sample.
    """
    n, _, h, w = features.shape
    scores = _conv(model, "context.attention", features, padding=0)
    return F.softmax(scores.reshape(n, h * w), axis=1).reshape(n, 1, h, w)


def context_stream_forward(model: MCAERModel, x, return_activation=False):
    config = model.config
    x = _as_tensor(model, x)
    _check_input(x, (3, config.context_h, config.context_w), "context")
    for index in range(1, 5):
        x = F.relu(_bn(model, f'context.bn{index}', _conv(model, f'context.conv{index}', x)))
        x = F.maxpool2d(x, 2, 2)
    if config.context_use_scconv:
        params = ScConvParams.from_params(model.params, "context.scconv")
        x = F.relu(scconv_forward(x, params, context_scconv_config(config)))
    else:
        x = F.relu(_bn(model, "context.bn5", _conv(model, "context.conv5", x)))
    attention = attention_map(model, x)
    boosted = x * attention
    feature = F.global_avgpool(boosted)
    if return_activation:
        return feature, attention, boosted
    return feature, attention


def body_stream_forward(model: MCAERModel, x):
    config = model.config
    if "body" not in config.enabled_streams:
        raise ConfigError('the body stream is not enabled in this model')
    x = _as_tensor(model, x)
    _check_input(x, (3, config.body_size, config.body_size), "body")
    p = model.params
    for index in range(1, 5):
        x = F.relu(_bn(model, f'body.bn{index}', _conv(model, f'body.conv{index}', x)))
        x = F.maxpool2d(x, 2, 2)
    for index in (1, 2):
        x = F.deconv2d(x, p[f'body.deconv{index}.weight'], p[f'body.deconv{index}.bias'], stride=2, padding=1)
        x = F.relu(_bn(model, f'body.dbn{index}', x))
    heatmaps = _conv(model, "body.heatmap", x, padding=0) if config.joints else None
    return F.global_avgpool(x), heatmaps


def _linear(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    return F.linear(x, params[f'{prefix}.weight'], params[f'{prefix}.bias'])


def adaptive_fusion(features: Sequence[Tensor], params: ParamSet, streams: Sequence[str], prefix="fusion"):
    """
    Returns (logits [N,K], weights [N,S]). Stream s gets weight softmax over the gate
    scalars; the classifier sees concat(weight_s * feature_s) in `streams` order.
    """
    if len(features) != len(streams):
        raise DimensionError(f'fusion got {len(features)} features for {len(streams)} streams')
    scores = []
    for feature, stream in zip(features, streams):
        hidden = F.relu(_linear(params, f'{prefix}.gate.{stream}.fc1', feature))
        scores.append(_linear(params, f'{prefix}.gate.{stream}.fc2', hidden))
    weights = F.softmax(F.concat(scores, axis=1), axis=1)
    fused = F.concat([weights[:, s : s + 1] * feature for s, feature in enumerate(features)], axis=1)
    hidden = F.relu(_linear(params, f'{prefix}.classifier.fc1', fused))
    return _linear(params, f'{prefix}.classifier.fc2', hidden), weights


def _stream_inputs(inputs):
    if isinstance(inputs, dict):
        return inputs.get("face"), inputs.get("context"), inputs.get("body"), inputs.get("body_present")
    return inputs.face, inputs.context, inputs.body, inputs.body_present


def mcaer_forward(model: MCAERModel, inputs) -> ModelOutput:
    """
    Full forward pass over a StreamBatch (or a dict with face/context/body arrays).

    A sample whose body cue is missing (`body_present` false) contributes a zero body feature.
    """
    config = model.config
    face, context, body, present = _stream_inputs(inputs)
    features = {}
    features["face"] = face_stream_forward(model, face)
    context_feature, attention, boosted = context_stream_forward(model, context, return_activation=True)
    features["context"] = context_feature

    heatmaps = None
    if "body" in config.enabled_streams:
        if body is None:
            raise DimensionError('body stream is enabled but no body input was given')
        body_feature, heatmaps = body_stream_forward(model, body)
        if present is not None and not np.all(present):
            keep = np.asarray(present, dtype=model.dtype).reshape(-1, 1)
            body_feature = body_feature * Tensor(keep, dtype=model.dtype)
        features["body"] = body_feature

    streams = config.streams
    logits, weights = adaptive_fusion([features[stream] for stream in streams], model.params, streams)
    return ModelOutput(logits, weights, attention, heatmaps, boosted, features)
