"""
Self-verification suites run by `mcaer selftest`.

gradient:   finite differences against every differentiable op, the attention module,
            the fusion head and the width-reduced network end to end (float64)
shape:      full-size stream traces
invariant:  normalizations that must hold exactly, SCConv channel generality
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
from tabulate import tabulate

from mcaer import functional as F
from mcaer import rng as rngs
from mcaer.constants import NUM_CLASSES, STREAMS
from mcaer.gradcheck import finite_diff_check, sample_indices
from mcaer.model import (
    ModelConfig,
    adaptive_fusion,
    attention_map,
    body_stream_forward,
    build_model,
    context_stream_forward,
    face_stream_forward,
    mcaer_forward,
)
from mcaer.preprocessing import PrepConfig
from mcaer.scconv import ScConvConfig, build_scconv, scconv_forward
from mcaer.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

EPS = 1e-5
# the full network has ReLU and max-pool kinks that a 1e-5 step can cross
END_TO_END_EPS = 1e-6
OP_TOLERANCE = 1e-5
COMPOSITE_TOLERANCE = 1e-4
SUM_TOLERANCE = 1e-6
SAMPLED = 10
OP_ELEMENTS = 64


def small_model_config(streams=STREAMS, **overrides) -> ModelConfig:
    """
    Channels divided by 8 on 32x32 faces, 32x56 context and 64x64 bodies.
    """
    options = dict(face_size=32, context_h=32, context_w=56, body_size=64, width_divisor=8, enabled_streams=streams)
    options.update(overrides)
    return ModelConfig(**options)


def small_prep_config(**overrides) -> PrepConfig:
    options = dict(face_size=32, context_pad_h=96, context_pad_w=168, context_scale=3, body_size=64)
    options.update(overrides)
    return PrepConfig(**options)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float = 0.0
    tolerance: Optional[float] = None
    detail: str = ''


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights, dtype=out.dtype)).sum()


def _weighted(op: Callable[[], Tensor], rng) -> Callable:
    """
    Scalar function of the op's current inputs, `sum(op() * W)` for a fixed random W.
    """
    with no_grad():
        shape = op().shape
    weights = rng.standard_normal(shape)
    return lambda _: weighted_sum(op(), weights)


def _tensor(rng, *shape, low=None) -> Tensor:
    data = rng.standard_normal(shape)
    if low is not None:
        # keep every entry at least `low` away from zero
        data = np.sign(data) * (low + np.abs(data))
    return Tensor(data)


def _distinct(rng, *shape) -> Tensor:
    # a permutation keeps pooling windows free of ties
    return Tensor(rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))


def op_cases(rng):
    """
    Yields (name, scalar function, tensor to differentiate, tolerance).
    """
    x, w, b = _tensor(rng, 2, 3, 6, 7), _tensor(rng, 4, 3, 3, 3), _tensor(rng, 4)
    f = _weighted(lambda: F.conv2d(x, w, b, stride=1, padding=1), rng)
    yield 'conv2d x', f, x, OP_TOLERANCE
    yield 'conv2d w', f, w, OP_TOLERANCE
    yield 'conv2d b', f, b, OP_TOLERANCE
    f = _weighted(lambda: F.conv2d(x, w, None, stride=2, padding=0), rng)
    yield 'conv2d stride 2', f, x, OP_TOLERANCE

    x, w, b = _tensor(rng, 2, 3, 4, 5), _tensor(rng, 3, 2, 4, 4), _tensor(rng, 2)
    f = _weighted(lambda: F.deconv2d(x, w, b, stride=2, padding=1), rng)
    yield 'deconv2d x', f, x, OP_TOLERANCE
    yield 'deconv2d w', f, w, OP_TOLERANCE

    x, gamma, beta = _tensor(rng, 4, 3, 5, 5), _tensor(rng, 3), _tensor(rng, 3)
    f = _weighted(lambda: F.batchnorm2d(x, gamma, beta, None, mode='train'), rng)
    yield 'batchnorm2d train x', f, x, OP_TOLERANCE
    yield 'batchnorm2d gamma', f, gamma, OP_TOLERANCE
    stats = F.BatchNormStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    f = _weighted(lambda: F.batchnorm2d(x, gamma, beta, stats, mode='eval'), rng)
    yield 'batchnorm2d eval x', f, x, OP_TOLERANCE

    x = _tensor(rng, 3, 4, 5, 5, low=0.1)
    yield 'relu', _weighted(lambda: F.relu(x), rng), x, OP_TOLERANCE
    x = _tensor(rng, 3, 7)
    yield 'sigmoid', _weighted(lambda: F.sigmoid(x), rng), x, OP_TOLERANCE
    yield 'softmax', _weighted(lambda: F.softmax(x, axis=1), rng), x, OP_TOLERANCE
    yield 'log_softmax', _weighted(lambda: F.log_softmax(x, axis=1), rng), x, OP_TOLERANCE

    x = _distinct(rng, 2, 3, 7, 9)
    yield 'maxpool2d', _weighted(lambda: F.maxpool2d(x, 2, 2), rng), x, OP_TOLERANCE
    yield 'avgpool2d', _weighted(lambda: F.avgpool2d(x, 2, 2), rng), x, OP_TOLERANCE
    yield 'global_avgpool', _weighted(lambda: F.global_avgpool(x), rng), x, OP_TOLERANCE
    yield 'upsample_nearest', _weighted(lambda: F.upsample_nearest(x, 2), rng), x, OP_TOLERANCE
    yield 'fit2d', _weighted(lambda: F.fit2d(x, 5, 12), rng), x, OP_TOLERANCE
    yield 'channel_map', _weighted(lambda: F.channel_map(x, 5), rng), x, OP_TOLERANCE

    x, w, b = _tensor(rng, 3, 4), _tensor(rng, 5, 4), _tensor(rng, 5)
    f = _weighted(lambda: F.linear(x, w, b), rng)
    yield 'linear x', f, x, OP_TOLERANCE
    yield 'linear w', f, w, OP_TOLERANCE
    labels = rng.integers(0, 5, size=3)
    yield 'cross_entropy', lambda _: F.cross_entropy(F.linear(x, w, b), labels), x, OP_TOLERANCE

    pred, target = _tensor(rng, 4, 2, 3, 3), rng.standard_normal((4, 2, 3, 3))
    mask = np.array([True, False, True, True])
    yield 'mse_masked', lambda _: F.mse_masked(pred, target, mask), pred, OP_TOLERANCE


def composite_cases(rng, model=None):
    config = ScConvConfig(c_in=4, c_out=4, pool_rate=2)
    params = build_scconv(config, rng)
    x = _tensor(rng, 2, 4, 6, 6)
    f = _weighted(lambda: scconv_forward(x, params, config), rng)
    yield 'scconv x', f, x, OP_TOLERANCE
    for bank in ("k1", "k2", "k3", "k4"):
        yield f'scconv {bank}', f, params.weights[bank], OP_TOLERANCE

    model = model or build_model(small_model_config(), seed=int(rng.integers(1 << 30)))
    features = _tensor(rng, 2, model.config.feature_dim, 3, 4)
    f = _weighted(lambda: attention_map(model, features), rng)
    yield 'attention features', f, features, COMPOSITE_TOLERANCE
    yield 'attention weight', f, model.params['context.attention.weight'], COMPOSITE_TOLERANCE

    streams = model.config.streams
    inputs = [_tensor(rng, 3, model.config.feature_dim) for _ in streams]
    f = _weighted(lambda: adaptive_fusion(inputs, model.params, streams)[0], rng)
    yield 'fusion feature', f, inputs[0], COMPOSITE_TOLERANCE
    yield f'fusion gate {streams[-1]}', f, model.params[f'fusion.gate.{streams[-1]}.fc1.weight'], COMPOSITE_TOLERANCE


def random_inputs(config: ModelConfig, n: int, rng) -> dict:
    inputs = {
        "face": rng.uniform(0, 1, (n, 3, config.face_size, config.face_size)),
        "context": rng.uniform(0, 1, (n, 3, config.context_h, config.context_w)),
    }
    if "body" in config.streams:
        inputs["body"] = rng.uniform(0, 1, (n, 3, config.body_size, config.body_size))
    return inputs


def end_to_end_cases(rng, model):
    """
    cross_entropy of the full forward pass against a sampled parameter subset of every module.
    """
    model.eval()
    inputs = random_inputs(model.config, 2, rng)
    labels = rng.integers(0, NUM_CLASSES, size=2)
    f = lambda _: F.cross_entropy(mcaer_forward(model, inputs).logits, labels)
    for module in ("face.conv1", "face.bn5", "context.conv2", "context.scconv.k2", "context.attention", "body.deconv1",
                   "fusion.gate.face", "fusion.classifier"):
        names = [name for name in model.params if name.startswith(module) and name.endswith(("weight", "gamma"))]
        if not names:
            continue
        yield f'end-to-end {names[0]}', f, model.params[names[0]], COMPOSITE_TOLERANCE


def _grad_hook(perturb: float):
    if not perturb:
        return None
    return lambda grad: grad + perturb


def gradient_suite(seeds=20, perturb=0.0) -> List[CheckResult]:
    worst = {}
    hook = _grad_hook(perturb)
    model_config = small_model_config()
    for seed in range(seeds):
        rng = rngs.stream(seed, "selftest", "gradient")
        model = build_model(model_config, seed=seed)
        cases = [*op_cases(rng), *composite_cases(rng, model), *end_to_end_cases(rng, model)]
        for name, f, x, tolerance in cases:
            end_to_end = name.startswith('end-to-end')
            indices = sample_indices(x.size, SAMPLED if end_to_end else OP_ELEMENTS, rng)
            eps = END_TO_END_EPS if end_to_end else EPS
            error = finite_diff_check(f, x, eps=eps, indices=indices, grad_hook=hook)
            previous = worst.get(name, (0.0, tolerance))[0]
            worst[name] = (error if np.isnan(error) else max(previous, error), tolerance)
    return [
        CheckResult('gradient', name, bool(error < tolerance), error, tolerance, f'{seeds} seeds')
        for name, (error, tolerance) in worst.items()
    ]


def _shape_check(name, actual, expected) -> CheckResult:
    actual = list(actual)
    return CheckResult('shape', name, actual == list(expected), detail=f'{actual} expected {list(expected)}')


def shape_suite(seed=0) -> List[CheckResult]:
    """
    Full-size traces: face 96x96, context 133x237, body 256x256, one sample each.
    """
    rng = rngs.stream(seed, "selftest", "shape")
    config = ModelConfig()
    model = build_model(config, seed=seed, dtype=np.float32).eval()
    inputs = random_inputs(config, 1, rng)
    results = [_shape_check('face map', config.face_map, (6, 6)), _shape_check('context map', config.context_map, (8, 14))]
    with no_grad():
        face = face_stream_forward(model, inputs["face"].astype(np.float32))
        context, attention = context_stream_forward(model, inputs["context"].astype(np.float32))
        body, heatmaps = body_stream_forward(model, inputs["body"].astype(np.float32))
    results += [
        _shape_check('face stream', face.shape, (1, 256)),
        _shape_check('context stream', context.shape, (1, 256)),
        _shape_check('attention map', attention.shape, (1, 1, 8, 14)),
        _shape_check('body stream', body.shape, (1, 256)),
        _shape_check('body heatmaps', heatmaps.shape, (1, config.joints, 64, 64)),
    ]
    return results


def _sum_check(name, values, axis) -> CheckResult:
    error = float(np.abs(values.sum(axis=axis) - 1.0).max())
    passed = error < SUM_TOLERANCE and bool((values >= 0).all())
    return CheckResult('invariant', name, passed, error, SUM_TOLERANCE, f'{values.shape[0]} samples')


def invariant_suite(seed=0, samples=100) -> List[CheckResult]:
    rng = rngs.stream(seed, "selftest", "invariant")
    model = build_model(small_model_config(), seed=seed).eval()
    with no_grad():
        output = mcaer_forward(model, random_inputs(model.config, samples, rng))
    attention = output.attention.numpy().reshape(samples, -1)
    results = [
        _sum_check('attention sums to 1', attention, 1),
        _sum_check('fusion weights sum to 1', output.weights.numpy(), 1),
        _sum_check('class probabilities sum to 1', output.probabilities(), 1),
    ]

    for c_in in (2, 4, 8):
        for c_out in (2, 4, 8, 16):
            config = ScConvConfig(c_in=c_in, c_out=c_out, pool_rate=2)
            params = build_scconv(config, rng)
            with no_grad():
                out = scconv_forward(_tensor(rng, 2, c_in, 6, 6), params, config)
                zero = scconv_forward(Tensor(np.zeros((2, c_in, 6, 6))), params, config)
            passed = out.shape == (2, c_out, 6, 6) and not zero.numpy().any()
            results.append(
                CheckResult('invariant', f'scconv {c_in}->{c_out}', passed, detail=f'out {list(out.shape)}')
            )
    return results


def run_selftest(seeds=20, perturb=0.0, suites=("gradient", "shape", "invariant")) -> List[CheckResult]:
    runners = {
        "gradient": lambda: gradient_suite(seeds, perturb),
        "shape": shape_suite,
        "invariant": invariant_suite,
    }
    results = []
    for suite in suites:
        start = time.time()
        results += runners[suite]()
        logger.info('%s suite done in %.1fs', suite, time.time() - start)
    return results


def format_results(results: List[CheckResult]) -> str:
    rows = [
        [r.suite, r.name, 'pass' if r.passed else 'FAIL', r.value if r.tolerance is not None else '', r.tolerance or '', r.detail]
        for r in results
    ]
    return tabulate(rows, headers=["suite", "check", "result", "max error", "tolerance", ""], floatfmt=".2e")
