"""Named parameters with their gradient accumulators and RMSProp caches."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from cadnet.errors import ConfigurationError
from cadnet.numerics.autodiff import Var


class ParameterStore:
    """Ordered mapping ``name -> tensor`` with a matching gradient and cache per entry.

    Iteration order is insertion order, which fixes the byte layout of
    checkpoints and the order of optimizer updates.
    """

    def __init__(self, dtype: np.dtype | type = np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.caches: dict[str, np.ndarray] = {}
        self._vars: dict[str, Var] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.caches[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def var(self, name: str) -> Var:
        """Leaf Var bound to a parameter for the current forward pass."""
        v = Var(self.values[name], requires_grad=True, name=name)
        self._vars[name] = v
        return v

    def collect_grads(self) -> None:
        """Add gradients from the last backward pass into the accumulators.

        Parameters never touched by the loss keep a zero gradient.
        """
        for name, v in self._vars.items():
            if v.grad is not None:
                self.grads[name] += v.grad.astype(self.dtype, copy=False)
        self._vars.clear()

    def release(self) -> None:
        """Forget Vars bound since the last backward pass (inference-only forwards)."""
        self._vars.clear()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.dtype)
        for name in self.values:
            out.values[name] = self.values[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.caches[name] = self.caches[name].copy()
        return out

    def astype(self, dtype: np.dtype | type) -> "ParameterStore":
        out = ParameterStore(dtype)
        for name, v in self.values.items():
            out.add(name, v)
            out.caches[name][...] = self.caches[name]
        return out
