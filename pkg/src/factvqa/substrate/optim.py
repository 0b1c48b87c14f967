"""RMSProp with velocity smoothing and decoupled weight decay.

Per parameter, with gradient g:

    accum    <- rho * accum + (1 - rho) * g^2
    velocity <- momentum * velocity + lr * g / sqrt(accum + eps)
    value    <- value - velocity - lr * weight_decay * value

Gradients are zeroed after the step. The variant identifier below is
written into every checkpoint config so a saved run records exactly which
update rule produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from .params import ParameterStore

VARIANT = "rmsprop-velocity-momentum-decoupled-decay"


@dataclass
class RmsProp:
    lr: float = 3e-4
    momentum: float = 0.0
    rho: float = 0.95
    weight_decay: float = 0.0
    eps: float = 1e-8
    _accum: dict = field(default_factory=dict, repr=False)
    _velocity: dict = field(default_factory=dict, repr=False)

    def describe(self) -> dict:
        return {
            "variant": VARIANT,
            "lr": self.lr,
            "momentum": self.momentum,
            "rho": self.rho,
            "weight_decay": self.weight_decay,
            "eps": self.eps,
        }

    def step(self, store: ParameterStore):
        for name in store.trainable_names():
            g = store.grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            if name not in self._accum:
                self._accum[name] = np.zeros_like(g)
                self._velocity[name] = np.zeros_like(g)
            a = self._accum[name]
            v = self._velocity[name]
            a *= self.rho
            a += (1.0 - self.rho) * g * g
            v *= self.momentum
            v += self.lr * g / np.sqrt(a + self.eps)
            value = store.values[name]
            value -= v
            if self.weight_decay:
                value -= self.lr * self.weight_decay * value
        store.zero_grads()


def rmsprop_step(store: ParameterStore, lr: float, momentum: float = 0.0,
                 decay_accum: float = 0.95, weight_decay: float = 0.0,
                 eps: float = 1e-8, state: RmsProp | None = None) -> RmsProp:
    """One-shot functional form; returns the optimizer state for reuse."""
    if state is None:
        state = RmsProp(lr=lr, momentum=momentum, rho=decay_accum,
                        weight_decay=weight_decay, eps=eps)
    state.step(store)
    return state
