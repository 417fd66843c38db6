"""
Adam with decoupled-from-norm weight decay and the linear learning-rate
schedule.
"""
from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping
from typing import TYPE_CHECKING, Optional

import numpy as np

from .defaults import config
from .tensor import NonFiniteError, ShapeError

if TYPE_CHECKING:
    from .model import ParameterStore

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class AdamState:
    """
    Per-parameter moment estimates and the shared step counter.

    Attributes
    ----------
    first_moment : dict
        Parameter name to first-moment array.
    second_moment : dict
        Parameter name to second-moment array.
    step : int
        Number of updates applied so far.
    """

    beta1: float = config.getfloat("optimizer", "beta1")
    beta2: float = config.getfloat("optimizer", "beta2")
    eps: float = config.getfloat("optimizer", "eps")
    step: int = 0
    first_moment: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterStore, **kwargs) -> AdamState:
        state = cls(**kwargs)
        for name, param in params.items():
            state.first_moment[name] = np.zeros_like(param.data)
            state.second_moment[name] = np.zeros_like(param.data)
        return state


def adam_step(
    params: ParameterStore,
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
):
    """
    Apply one Adam update in place.

    ``weight_decay * param`` is added to the gradient of every parameter
    flagged for decay (convolution and linear weights) before the moment
    updates; biases and normalization parameters are never decayed.  A
    missing gradient counts as zero.

    Raises
    ------
    NonFiniteError
        If any gradient holds NaN or infinity.  No parameter is touched.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(
                f"Gradient for {name!r} has shape {grad.shape}, parameter {param.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name!r}")

    state.step += 1
    step = state.step
    bias1 = 1.0 - state.beta1**step
    bias2 = 1.0 - state.beta2**step

    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else grad
        if weight_decay and params.decays(name):
            grad = grad + weight_decay * param.data

        first = state.first_moment.setdefault(name, np.zeros_like(param.data))
        second = state.second_moment.setdefault(name, np.zeros_like(param.data))
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad

        update = lr * (first / bias1) / (np.sqrt(second / bias2) + state.eps)
        param.data -= update.astype(param.dtype)


def linear_decay(lr0: float, iteration: int, iterations: int) -> float:
    """Learning rate decayed linearly from ``lr0`` at 0 to zero at ``iterations``."""
    if iterations <= 0:
        raise ValueError(f"iterations must be positive, got {iterations}")
    return lr0 * (1.0 - iteration / iterations)
