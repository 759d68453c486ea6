import logging
from typing import Any, Dict, Mapping, Optional

import numpy as np

from sepprune.core.autodiff import TensorNode
from sepprune.core.errors import InvalidArgumentError

log = logging.getLogger("root")


class AdamState(object):
    """First and second moment estimates for a set of named parameters."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first_moments = {}  # type: Dict[str, np.ndarray]
        self.second_moments = {}  # type: Dict[str, np.ndarray]

    def state_dict(self) -> Dict[str, Any]:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "first_moments": {name: value.copy() for name, value in self.first_moments.items()},
            "second_moments": {name: value.copy() for name, value in self.second_moments.items()},
        }

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.step = state["step"]
        self.first_moments = {name: np.array(value) for name, value in state["first_moments"].items()}
        self.second_moments = {name: np.array(value) for name, value in state["second_moments"].items()}


def adam_step(
    params: Mapping[str, TensorNode], grads: Mapping[str, Optional[np.ndarray]], state: AdamState, lr: float
) -> None:
    """
    One bias-corrected Adam update, in place. Parameters whose gradient is missing keep their values and moments.
    """
    if lr <= 0:
        raise InvalidArgumentError("Learning rate must be positive, got {}".format(lr))
    for name, grad in grads.items():
        if grad is None:
            continue
        if name not in params:
            raise InvalidArgumentError("Gradient for unknown parameter '{}'".format(name))
        if grad.shape != params[name].shape:
            raise InvalidArgumentError(
                "Gradient shape {} does not match parameter '{}' of shape {}".format(
                    grad.shape, name, params[name].shape
                )
            )

    state.step += 1
    first_correction = 1.0 - state.beta1 ** state.step
    second_correction = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        first = state.first_moments.get(name)
        second = state.second_moments.get(name)
        if first is None:
            first = np.zeros_like(param.values)
            second = np.zeros_like(param.values)
        elif first.shape != param.shape:
            raise InvalidArgumentError("Optimizer moments for '{}' do not match its shape".format(name))
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad * grad
        state.first_moments[name] = first.astype(param.dtype)
        state.second_moments[name] = second.astype(param.dtype)
        update = lr * (first / first_correction) / (np.sqrt(second / second_correction) + state.eps)
        param.values -= update.astype(param.dtype)


def gradients_of(params: Mapping[str, TensorNode]) -> Dict[str, Optional[np.ndarray]]:
    return {name: param.grad for name, param in params.items()}


def zero_grads(params: Mapping[str, TensorNode]) -> None:
    for param in params.values():
        param.zero_grad()
