"""
Grad-CAM over the attention-boosted context feature map.
"""
import logging
from dataclasses import dataclass

import numpy as np

from mcaer.errors import ValidationError
from mcaer.model import MCAERModel, mcaer_forward
from mcaer.preprocessing import resize_bilinear
from mcaer.tensor import Tensor, backward

logger = logging.getLogger(__name__)


@dataclass
class GradCam:
    heatmap: np.ndarray
    target_class: int
    probability: float


def cam_from_gradients(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """
    relu(sum_k alpha_k A_k) with alpha_k the spatial mean of dlogit/dA_k, then scaled so the
    maximum is 1. An all-zero map stays all zero.
    """
    alpha = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activations, axes=(0, 0)), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def grad_cam(logits: Tensor, activations: Tensor, target_class: int) -> np.ndarray:
    """
    Explain `logits[0, target_class]` with `activations` [1,C,h,w], an intermediate of the graph
    that produced the logits. Returns the normalized [h,w] map.
    """
    if not 0 <= target_class < logits.shape[1]:
        raise ValidationError(f'class {target_class} out of range [0, {logits.shape[1]})')
    if activations.shape[0] != 1:
        raise ValidationError(f'grad-cam explains one sample at a time, got a batch of {activations.shape[0]}')
    activations.grad = None
    backward(logits[:, target_class].sum())
    grads = activations.grad if activations.grad is not None else np.zeros_like(activations.data)
    return cam_from_gradients(activations.data[0], grads[0])


def gradcam(model: MCAERModel, inputs, target_class: int) -> GradCam:
    """
    Grad-CAM of one sample in eval mode. Parameter gradients are restored afterwards,
    so a call leaves no trace on the model.
    """
    if not 0 <= target_class < len(model.class_names):
        raise ValidationError(f'class {target_class} out of range, choose from {list(model.class_names)}')
    saved = {name: (None if param.grad is None else param.grad.copy()) for name, param in model.params.items()}
    mode = model.mode
    model.eval()
    try:
        output = mcaer_forward(model, inputs)
        heatmap = grad_cam(output.logits, output.context_activation, target_class)
    finally:
        model.mode = mode
        for name, param in model.params.items():
            param.grad = saved[name]
    probability = float(output.probabilities()[0, target_class])
    logger.debug('grad-cam class=%d probability=%.4f peak=%.4f', target_class, probability, heatmap.max())
    return GradCam(heatmap, target_class, probability)


def upscale(heatmap: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.clip(resize_bilinear(heatmap, height, width), 0.0, 1.0)
