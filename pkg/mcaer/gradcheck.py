"""
Finite-difference gradient oracle.
"""
import logging
from typing import Callable, Optional, Sequence

import numpy as np

from mcaer.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def sample_indices(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if count >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=count, replace=False))


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps=1e-5,
    indices: Optional[Sequence[int]] = None,
    grad_hook: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> float:
    """
    Compare the analytic gradient of scalar `f(x)` with central differences.

    `x` is perturbed in place, one flat element at a time, and restored afterwards, so `f`
    may equally ignore its argument and read a model parameter that is `x`. Returns
    max |a - n| / max(|a|, |n|, 1e-8) over the checked elements, NaN when f yields NaN.
    """
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if grad_hook is not None:
        analytic = grad_hook(analytic)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    worst = 0.0
    for index in indices:
        original = flat[index]
        with no_grad():
            flat[index] = original + eps
            plus = f(x).item()
            flat[index] = original - eps
            minus = f(x).item()
        flat[index] = original
        numeric = (plus - minus) / (2 * eps)
        a = analytic[index]
        error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if np.isnan(error):
            return float('nan')
        worst = max(worst, error)

    logger.debug('finite difference check on %s: %d elements max error %.3e', x, len(indices), worst)
    return float(worst)
