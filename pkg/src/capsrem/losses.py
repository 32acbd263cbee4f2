"""Margin loss, reconstruction loss and their weighted total (all batch-mean)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelRangeError, ShapeError
from .tensor import Tensor

# keeps the norm differentiable at zero without a measurable bias on the loss
NORM_EPS = 1e-20


@dataclass
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    beta: float = 0.0005

    def __post_init__(self):
        if not 0 <= self.m_minus < self.m_plus <= 1:
            raise ConfigError(f"need 0 <= m_minus < m_plus <= 1, got {self.m_minus}, {self.m_plus}")
        if self.lambda_down < 0:
            raise ConfigError(f"lambda_down must be >= 0, got {self.lambda_down}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


def _one_hot(targets, num_classes: int, dtype) -> np.ndarray:
    targets = np.atleast_1d(np.asarray(targets))
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise LabelRangeError(f"labels must lie in [0, {num_classes}), got range "
                              f"[{targets.min()}, {targets.max()}]")
    onehot = np.zeros((targets.size, num_classes), dtype=dtype)
    onehot[np.arange(targets.size), targets.astype(np.int64)] = 1
    return onehot


def margin_loss(class_poses, targets, config: LossConfig = None) -> Tensor:
    """Per-class hinge on capsule lengths, summed over classes, averaged over the batch.

    Present class: ``max(0, m+ - |u|)^2``; absent class:
    ``lambda * max(0, |u| - m-)^2``. At the hinge the subgradient is 0.
    """
    config = config or LossConfig()
    class_poses = T.as_tensor(class_poses)
    if class_poses.ndim == 2:
        class_poses = class_poses.reshape((1,) + class_poses.shape)
    present = _one_hot(targets, class_poses.shape[1], class_poses.dtype)
    if present.shape[0] != class_poses.shape[0]:
        raise ShapeError(f"{present.shape[0]} labels for a batch of {class_poses.shape[0]}")
    norms = T.vector_norm(class_poses, NORM_EPS)
    up = T.relu(config.m_plus - norms) ** 2
    down = T.relu(norms - config.m_minus) ** 2
    per_class = up * present + down * (config.lambda_down * (1 - present))
    return per_class.sum(axis=1).mean()


def reconstruction_loss(recon, images) -> Tensor:
    """Sum of squared pixel differences per sample, averaged over the batch."""
    recon = T.as_tensor(recon)
    target = images.data if isinstance(images, Tensor) else np.asarray(images)
    if recon.ndim == 1:
        recon = recon.reshape(1, -1)
    target = target.reshape(recon.shape[0], -1) if target.size == recon.size else target
    if target.shape != recon.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs image {target.shape}")
    diff = recon - target.astype(recon.dtype)
    return (diff * diff).sum(axis=1).mean()


def total_loss(margin, recon=None, beta: float = 0.0, decoder_enabled: bool = True):
    """margin + beta * recon; the reconstruction term is dropped without a decoder."""
    if recon is None or not decoder_enabled:
        return margin
    return margin + recon * beta
