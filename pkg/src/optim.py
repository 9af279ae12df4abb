# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Optimisers and schedules.

- SGD with momentum, weight decay and global-norm gradient clipping, with
  cosine annealing that restarts every ``anneal_freq`` iterations (``η_min = 0``).
- Adadelta for the meta-test feature adaptation.
- Linear annealing of the distillation weights to zero.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from src.tensor import FloatArray, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SgdConfig:
    """SGD hyperparameters.

    Attributes:
        lr: Peak learning rate ``η_max``.
        momentum: Heavy-ball momentum in ``[0, 1)``.
        weight_decay: L2 coefficient added to the gradient.
        anneal_freq: Cosine period ``F``; the schedule restarts every ``F`` steps.
        max_iter: Number of optimisation steps.
        batch_size: Base per-domain batch size.
        clip_norm: Rescale the step's gradients so their global L2 norm is at
            most this value; None disables clipping.
    """

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 7e-4
    anneal_freq: int = 400
    max_iter: int = 1200
    batch_size: int = 16
    clip_norm: float | None = 1.0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.anneal_freq <= 0:
            raise ValueError(f"anneal_freq must be positive, got {self.anneal_freq}")
        if self.max_iter < 0 or self.weight_decay < 0 or self.batch_size <= 0:
            raise ValueError(f"Invalid SGD config {self}")


def cosine_lr(config: SgdConfig, t: int) -> float:
    """``η(t) = η_max · ½(1 + cos(π · (t mod F) / F))``.

    Examples:
        >>> cosine_lr(SgdConfig(lr=1.0, anneal_freq=10), 0)
        1.0
        >>> round(cosine_lr(SgdConfig(lr=1.0, anneal_freq=10), 5), 12)
        0.5
    """
    phase = (t % config.anneal_freq) / config.anneal_freq
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * phase))


@dataclass
class SgdState:
    """Momentum buffers keyed by parameter identity."""

    velocity: dict[int, FloatArray] = field(default_factory=dict)


def _require_grad(params: Sequence[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"Parameter {i} {p.shape} has no gradient")


def global_norm(params: Sequence[Tensor]) -> float:
    """L2 norm of all gradients taken together."""
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_scale(params: Sequence[Tensor], clip_norm: float | None) -> float:
    """Factor that brings the global gradient norm down to ``clip_norm``.

    Examples:
        >>> p = Tensor([0.0, 0.0], requires_grad=True)
        >>> p.grad = np.array([3.0, 4.0])
        >>> clip_scale([p], 1.0)
        0.2
        >>> clip_scale([p], None)
        1.0
    """
    if clip_norm is None:
        return 1.0
    norm = global_norm(params)
    if norm <= clip_norm:
        return 1.0
    logger.debug("Clipping gradient norm %.4g to %.4g", norm, clip_norm)
    return clip_norm / norm


def sgd_step(params: Sequence[Tensor], state: SgdState, config: SgdConfig, t: int) -> float:
    """One SGD step using each parameter's accumulated ``grad``.

    ``g ← g·min(1, c/‖g‖)``; ``v ← momentum·v + g + wd·p``; ``p ← p − η(t)·v``.
    The norm ``‖g‖`` spans every parameter of the step.

    Returns:
        The learning rate used.

    Raises:
        ValueError: If a parameter has no gradient.
    """
    _require_grad(params)
    lr = cosine_lr(config, t)
    scale = clip_scale(params, config.clip_norm)
    for p in params:
        assert p.grad is not None
        v = state.velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[id(p)] = v
        v *= config.momentum
        v += scale * p.grad + config.weight_decay * p.data
        p.data -= lr * v
    return lr


@dataclass
class AdadeltaState:
    """Running averages ``E[g²]`` and ``E[Δx²]`` per parameter."""

    rho: float = 0.9
    eps: float = 1e-6
    square_grad: dict[int, FloatArray] = field(default_factory=dict)
    square_delta: dict[int, FloatArray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.rho < 1 or self.eps <= 0:
            raise ValueError(f"Invalid Adadelta settings rho={self.rho}, eps={self.eps}")


def adadelta_step(params: Sequence[Tensor], state: AdadeltaState, lr: float = 1.0) -> None:
    """One Adadelta step.

    ``E[g²] ← ρE[g²] + (1−ρ)g²``;
    ``Δ = −sqrt(E[Δx²] + ε) / sqrt(E[g²] + ε) · g``;
    ``E[Δx²] ← ρE[Δx²] + (1−ρ)Δ²``; ``p ← p + lr·Δ``.

    Raises:
        ValueError: If a parameter has no gradient.
    """
    _require_grad(params)
    for p in params:
        assert p.grad is not None
        g = p.grad
        key = id(p)
        sq_g = state.square_grad.setdefault(key, np.zeros_like(p.data))
        sq_d = state.square_delta.setdefault(key, np.zeros_like(p.data))
        sq_g *= state.rho
        sq_g += (1.0 - state.rho) * g * g
        delta = -np.sqrt(sq_d + state.eps) / np.sqrt(sq_g + state.eps) * g
        sq_d *= state.rho
        sq_d += (1.0 - state.rho) * delta * delta
        p.data += lr * delta


def anneal_lambda(lambda0: float, t: int, horizon: int) -> float:
    """Linearly anneal a loss weight to zero: ``λ0 · max(0, 1 − t/T)``.

    Examples:
        >>> anneal_lambda(4.0, 25, 100)
        3.0
        >>> anneal_lambda(4.0, 100, 100)
        0.0
    """
    if horizon <= 0:
        raise ValueError(f"Anneal horizon must be positive, got {horizon}")
    return lambda0 * max(0.0, 1.0 - max(t, 0) / horizon)
