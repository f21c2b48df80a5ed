"""
Differentiable neural-network operations on `Tensor`.

Spatial ops use NCHW layout. Convolutions gather sliding windows (im2col) and
contract them with the kernel in one tensordot; their backward passes scatter
window gradients back (col2im). Transposed convolution is the same pair run in the
opposite direction.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mcaer.errors import DimensionError, StateError, ValidationError
from mcaer.tensor import Tensor, make_result

logger = logging.getLogger(__name__)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """
    (N, C, H, W) -> read-only view (N, C, H', W', kh, kw) with floor output sizes.
    """
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, shape, stride: int) -> np.ndarray:
    """
    Inverse of `_windows`: sum (N, C, H', W', kh, kw) window values into an (N, C, H, W) array.
    """
    _, _, out_h, out_w, kh, kw = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[:, :, :, :, i, j]
    return out


def _check_rank(x: Tensor, rank: int, op: str):
    if x.ndim != rank:
        raise DimensionError(f'{op}: expected a rank-{rank} tensor, got shape {list(x.shape)}')


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    _check_rank(x, 4, 'conv2d')
    _check_rank(w, 4, 'conv2d')
    n, c, h, width = x.shape
    out_c, in_c, kh, kw = w.shape
    if c != in_c:
        raise DimensionError(
            f'conv2d: x{list(x.shape)} has {c} channels but w{list(w.shape)} expects {in_c}'
        )
    if stride < 1:
        raise ValidationError(f'conv2d: stride must be >= 1, got {stride}')
    if conv_output_size(h, kh, stride, padding) < 1 or conv_output_size(width, kw, stride, padding) < 1:
        raise DimensionError(f'conv2d: kernel {kh}x{kw} larger than padded input x{list(x.shape)} p={padding}')
    if b is not None and b.shape != (out_c,):
        raise DimensionError(f'conv2d: bias b{list(b.shape)} does not match {out_c} output channels')

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(padded, kh, kw, stride)
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_cols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        grad_padded = _scatter_windows(grad_cols, padded.shape, stride)
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + width]
        grad_b = g.sum(axis=(0, 2, 3)) if b is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def deconv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """
    Transposed convolution. `w` has shape [C_in, C_out, kh, kw]; the output side is
    (H - 1) * stride - 2 * padding + kh.
    """
    _check_rank(x, 4, 'deconv2d')
    _check_rank(w, 4, 'deconv2d')
    n, c, h, width = x.shape
    in_c, out_c, kh, kw = w.shape
    if c != in_c:
        raise DimensionError(
            f'deconv2d: x{list(x.shape)} has {c} channels but w{list(w.shape)} expects {in_c}'
        )
    full_h, full_w = (h - 1) * stride + kh, (width - 1) * stride + kw
    if deconv_output_size(h, kh, stride, padding) < 1 or deconv_output_size(width, kw, stride, padding) < 1:
        raise DimensionError(f'deconv2d: padding {padding} leaves no output for x{list(x.shape)}')

    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, (n, out_c, full_h, full_w), stride)
    out = full[:, :, padding : full_h - padding, padding : full_w - padding]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        grad_full = np.zeros((n, out_c, full_h, full_w), dtype=g.dtype)
        grad_full[:, :, padding : full_h - padding, padding : full_w - padding] = g
        grad_cols = _windows(grad_full, kh, kw, stride)
        grad_x = np.tensordot(grad_cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(x.data, grad_cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3)) if b is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


@dataclass
class BatchNormStats:
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: Optional[BatchNormStats],
    mode='train',
    momentum=0.1,
    eps=1e-5,
) -> Tensor:
    """
    Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and folds the batch moments
    into `stats` (unbiased variance, exponential average with `momentum`); eval mode
    normalizes with `stats`.
    """
    _check_rank(x, 4, 'batchnorm2d')
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f'batchnorm2d: gamma{list(gamma.shape)}/beta{list(beta.shape)} do not match {channels} channels'
        )
    axes = (0, 2, 3)
    shape = (1, channels, 1, 1)

    if mode == 'train':
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if stats is not None:
            count = x.data.size // channels
            unbiased = var * count / max(count - 1, 1)
            if stats.initialized:
                stats.mean = (1 - momentum) * stats.mean + momentum * mean
                stats.var = (1 - momentum) * stats.var + momentum * unbiased
            else:
                stats.mean, stats.var = mean.copy(), unbiased
    elif mode == 'eval':
        if stats is None or not stats.initialized:
            raise StateError('batchnorm2d: eval mode needs initialized running statistics')
        mean, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    else:
        raise ValidationError(f'batchnorm2d: unknown mode {mode!r}')

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_x_hat = g * gamma.data.reshape(shape)
        if mode == 'eval':
            grad_x = grad_x_hat * inv_std.reshape(shape)
        else:
            count = x.data.size // channels
            grad_x = (inv_std.reshape(shape) / count) * (
                count * grad_x_hat
                - grad_x_hat.sum(axis=axes, keepdims=True)
                - x_hat * (grad_x_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        return grad_x, grad_gamma, grad_beta

    return make_result(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _check_pool(x: Tensor, k: int, stride: int, op: str):
    _check_rank(x, 4, op)
    if stride < 1 or k < 1:
        raise ValidationError(f'{op}: kernel and stride must be >= 1')
    if k > x.shape[2] or k > x.shape[3]:
        raise ValidationError(f'{op}: kernel {k} larger than input x{list(x.shape)}')


def maxpool2d(x: Tensor, k=2, stride=None) -> Tensor:
    """
    Max pooling with floor semantics: trailing rows and columns that do not fill a window are dropped.
    """
    stride = stride or k
    _check_pool(x, k, stride, 'maxpool2d')
    win = _windows(x.data, k, k, stride)
    flat = win.reshape(win.shape[:4] + (k * k,))
    index = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, index, axis=-1)[..., 0]

    def backward(g):
        grad_flat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(grad_flat, index, g[..., None], axis=-1)
        return (_scatter_windows(grad_flat.reshape(win.shape), x.shape, stride),)

    return make_result(out, (x,), backward)


def avgpool2d(x: Tensor, k=2, stride=None) -> Tensor:
    stride = stride or k
    _check_pool(x, k, stride, 'avgpool2d')
    win = _windows(x.data, k, k, stride)
    out = win.mean(axis=(-2, -1))

    def backward(g):
        cols = np.broadcast_to((g / (k * k))[..., None, None], win.shape)
        return (_scatter_windows(cols, x.shape, stride),)

    return make_result(out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    _check_rank(x, 4, 'global_avgpool')
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return make_result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_rank(x, 4, 'upsample_nearest')
    if factor < 1:
        raise ValidationError(f'upsample_nearest: factor must be >= 1, got {factor}')
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return make_result(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def _fit_slices(size: int, target: int):
    if target >= size:
        before = (target - size) // 2
        return slice(0, size), slice(before, before + size)
    start = (size - target) // 2
    return slice(start, start + target), slice(0, target)


def fit2d(x: Tensor, height: int, width: int) -> Tensor:
    """
    Center-crop or zero-pad the spatial dims to exactly height x width.
    """
    _check_rank(x, 4, 'fit2d')
    src_h, dst_h = _fit_slices(x.shape[2], height)
    src_w, dst_w = _fit_slices(x.shape[3], width)
    if x.shape[2:] == (height, width):
        return x
    out = np.zeros(x.shape[:2] + (height, width), dtype=x.dtype)
    out[:, :, dst_h, dst_w] = x.data[:, :, src_h, src_w]

    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[:, :, src_h, src_w] = g[:, :, dst_h, dst_w]
        return (grad,)

    return make_result(out, (x,), backward)


def channel_map(x: Tensor, channels: int) -> Tensor:
    """
    Map the channel axis onto `channels` channels: nearest-repeat when growing, truncate when shrinking.
    """
    _check_rank(x, 4, 'channel_map')
    source = x.shape[1]
    if channels == source:
        return x
    if channels > source:
        index = (np.arange(channels) * source) // channels
    else:
        index = np.arange(channels)
    out = x.data[:, index]

    def backward(g):
        grad = np.zeros((source,) + g.shape[:1] + g.shape[2:], dtype=g.dtype)
        np.add.at(grad, index, g.transpose(1, 0, 2, 3))
        return (grad.transpose(1, 0, 2, 3),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    _check_rank(x, 2, 'linear')
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f'linear: x{list(x.shape)} does not match w{list(w.shape)}')
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValidationError(f'{op}: axis {axis} out of range for shape {list(x.shape)}')
    return axis % x.ndim


def _softmax(data: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(data - data.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis=-1) -> Tensor:
    axis = _check_axis(x, axis, 'softmax')
    out = _softmax(x.data, axis)
    return make_result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    axis = _check_axis(x, axis, 'log_softmax')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return make_result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    axis = _check_axis(tensors[0], axis, 'concat')
    out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    splits = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    return make_result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    Mean over the batch of -log softmax(logits)[label].
    """
    _check_rank(logits, 2, 'cross_entropy')
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValidationError(f'cross_entropy: {labels.shape[0]} labels for {n} rows of logits')
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f'cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}')
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss), (logits,), backward)


def mse_masked(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean squared error over the samples selected by a boolean `mask` along axis 0.
    """
    mask = np.asarray(mask, dtype=pred.dtype).reshape((-1,) + (1,) * (pred.ndim - 1))
    selected = int(mask.sum())
    per_sample = int(np.prod(pred.shape[1:]))
    diff = pred - Tensor(target, dtype=pred.dtype)
    weighted = diff * diff * Tensor(np.broadcast_to(mask, pred.shape), dtype=pred.dtype)
    return weighted.sum() * (1.0 / max(selected * per_sample, 1))
