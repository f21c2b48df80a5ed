"""
Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Operations that involve at least one tensor with
`requires_grad` record their parents and a backward closure; `backward(loss)` walks
the recorded graph in reverse topological order and accumulates `grad` on every
reachable tensor that requires it, intermediates included (Grad-CAM reads them).
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from mcaer.errors import ConfigError, ContractError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """
    Disable graph recording for the current thread.
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if np.issubdtype(array.dtype, np.floating) else DEFAULT_DTYPE
        array = np.ascontiguousarray(array, dtype=dtype)
        if any(dim <= 0 for dim in array.shape):
            raise ValidationError(f'tensor dimensions must be positive, got {list(array.shape)}')
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    def __repr__(self):
        name = f' {self.name}' if self.name else ''
        return f'<Tensor{name} shape={list(self.shape)} dtype={self.dtype} requires_grad={self.requires_grad}>'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    # arithmetic

    def __add__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return make_result(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return make_result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return make_result(
            a * b,
            (self, other),
            lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            return make_result(
                a / b,
                (self, other),
                lambda g: (unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)),
            )
        return self * (1.0 / other)

    # reductions and views

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return make_result(out, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return make_result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def __getitem__(self, index):
        original = self.shape

        def backward(g):
            grad = np.zeros(original, dtype=g.dtype)
            np.add.at(grad, index, g)
            return (grad,)

        return make_result(self.data[index], (self,), backward)


def make_result(data, parents: Sequence[Tensor], backward) -> Tensor:
    """
    Wrap the output of an op, attaching the graph edge when any parent needs a gradient.
    """
    dtype = parents[0].dtype if parents else None
    requires_grad = is_grad_enabled() and any(parent.requires_grad for parent in parents)
    out = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """
    Populate `grad` on every tensor reachable from a scalar loss.

    Gradients accumulate across calls; zero them between optimizer steps.
    """
    if loss.size != 1:
        raise ContractError(f'backward needs a scalar loss, got shape {list(loss.shape)}')
    if not loss.requires_grad:
        return

    # contributions of this pass only, so earlier accumulated grads are never propagated twice
    pending: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node._accumulate(grad)
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = np.asarray(parent_grad, dtype=parent.dtype)


class ParamSet:
    """
    Ordered registry of named trainable tensors.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def __repr__(self):
        return f'<ParamSet params={len(self)} values={self.count()}>'

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f'parameter {name} registered twice')
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def values(self):
        return list(self._params.values())

    def count(self) -> int:
        return sum(tensor.size for tensor in self._params.values())

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.zero_grad()

    def subset(self, prefix: str) -> "ParamSet":
        subset = ParamSet()
        for name, tensor in self._params.items():
            if name.startswith(prefix):
                subset._params[name] = tensor
        return subset


def he_uniform(shape, fan_in, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape), dtype=dtype)
