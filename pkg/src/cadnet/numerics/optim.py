"""RMSProp with a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cadnet.errors import ConfigurationError
from cadnet.numerics.params import ParameterStore


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (5, 18)
    rms_decay: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 < self.decay_factor < 1:
            raise ConfigurationError("decay_factor must lie in (0, 1)")
        if not 0 < self.rms_decay < 1:
            raise ConfigurationError("rms_decay must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigurationError(f"decay_epochs must be strictly increasing: {self.decay_epochs}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during ``epoch`` (1-based)."""
        n = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.learning_rate * self.decay_factor**n


def rmsprop_step(store: ParameterStore, config: OptimizerConfig, lr: float | None = None) -> None:
    """In-place update: ``cache = rho*cache + (1-rho)*g^2``, ``p -= lr*g/sqrt(cache+eps)``.

    Gradients are zeroed afterwards.
    """
    lr = config.learning_rate if lr is None else lr
    rho = config.rms_decay
    for name in store:
        g = store.grads[name]
        cache = store.caches[name]
        cache *= rho
        cache += (1 - rho) * g * g
        store.values[name] -= (lr * g / np.sqrt(cache + config.epsilon)).astype(store.dtype, copy=False)
        g.fill(0)
