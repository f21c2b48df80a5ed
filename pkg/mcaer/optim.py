import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from mcaer.constants import LR0, LR_DECAY, LR_STEP_EPOCHS, RMSPROP_ALPHA, RMSPROP_EPS
from mcaer.errors import StateError
from mcaer.tensor import ParamSet

logger = logging.getLogger(__name__)


@dataclass
class RmsPropState:
    lr: float = LR0
    alpha: float = RMSPROP_ALPHA
    eps: float = RMSPROP_EPS
    # running mean of squared gradients, one entry per parameter name
    acc: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def rmsprop_step(params: ParamSet, state: RmsPropState):
    """
    acc <- alpha * acc + (1 - alpha) * g^2;  p <- p - lr * g / (sqrt(acc) + eps)

    Gradients are left in place; the caller zeroes them before the next backward pass.
    """
    missing = [name for name, param in params.items() if param.grad is None]
    if missing:
        raise StateError(f'rmsprop_step: no gradient for {", ".join(missing)}')

    for name, param in params.items():
        grad = param.grad
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(param.data)
        acc *= state.alpha
        acc += (1 - state.alpha) * grad * grad
        param.data -= (state.lr * grad / (np.sqrt(acc) + state.eps)).astype(param.dtype)
    state.steps += 1


def lr_at_epoch(epoch: int, lr0=LR0, decay=LR_DECAY, step_epochs=LR_STEP_EPOCHS) -> float:
    return lr0 * decay ** (epoch // step_epochs)
