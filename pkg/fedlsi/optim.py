"""SGD with momentum and Adam over tape-populated gradients."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .const import DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY
from .errors import MissingGradientError, TensorError
from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


@dataclass
class SgdState:
    """Momentum SGD hyperparameters and per-parameter velocity buffers."""

    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        """Validate the hyperparameters."""
        if self.lr < 0:
            raise TensorError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise TensorError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise TensorError("weight decay must be non-negative")


@dataclass
class AdamState:
    """Adam hyperparameters, moment buffers and the step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    second: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        """Validate the hyperparameters."""
        if self.lr < 0:
            raise TensorError("learning rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TensorError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise TensorError("Adam eps must be positive")


def _require_grads(params: Sequence[Tensor]) -> None:
    for index, param in enumerate(params):
        if param.grad is None:
            raise MissingGradientError(f"parameter {index} {param.shape} has no grad")


def sgd_step(params: Sequence[Tensor], state: SgdState) -> None:
    """Apply ``v <- m*v + g + wd*w; w <- w - lr*v`` in place.

    Buffers are keyed by parameter identity so one state may be reused for the
    same parameter list across steps.
    """
    _require_grads(params)
    for param in params:
        assert param.grad is not None
        update = param.grad + state.weight_decay * param.data
        velocity = state.velocity.get(param.uid)
        if velocity is not None:
            update = state.momentum * velocity + update
        state.velocity[param.uid] = update
        param.data -= state.lr * update


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place."""
    _require_grads(params)
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param in params:
        assert param.grad is not None
        grad = param.grad
        first = state.first.get(param.uid, np.zeros_like(param.data))
        second = state.second.get(param.uid, np.zeros_like(param.data))
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad * grad
        state.first[param.uid] = first
        state.second[param.uid] = second
        m_hat = first / correction1
        v_hat = second / correction2
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
