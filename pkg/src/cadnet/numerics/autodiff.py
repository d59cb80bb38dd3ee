"""Taped reverse-mode differentiation over the handful of ops the network needs.

A :class:`Tape` records one backward closure per op during the forward pass;
:meth:`Tape.backward` replays them in reverse. It is deliberately not a general
engine: no broadcasting rules beyond what the ops below use, no higher-order
gradients, and the graph is consumed by a single backward call.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from cadnet.errors import UsageError
from cadnet.numerics import kernels
from cadnet.numerics.ops import check_finite, conv2d_cols, conv_geometry, sigmoid

BCE_CLAMP = 1e-6


class Var:
    """A value on the tape plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None) -> None:
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy() if g.base is not None else g
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Var(name={self.name!r}, shape={self.value.shape})"


class Tape:
    def __init__(self) -> None:
        self._ops: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _out(self, value: np.ndarray, parents: Sequence[Var], where: str) -> Var:
        check_finite(value, where)
        return Var(value, requires_grad=any(p.requires_grad for p in parents))

    def backward(self, loss: Var) -> None:
        """Propagate d(loss)/d(.) into every Var with ``requires_grad``."""
        if not self._ops:
            raise UsageError("backward() called with nothing recorded; run a forward pass first")
        if loss.value.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()

    # -- layers -----------------------------------------------------------

    def fc(self, x: Var, w: Var, b: Var) -> Var:
        out = self._out(x.value @ w.value + b.value, (x, w, b), "fc")

        def back() -> None:
            g = out.grad
            if g is None:
                return
            w.accumulate(x.value.T @ g)
            b.accumulate(g.sum(axis=0))
            if x.requires_grad:
                x.accumulate(g @ np.ascontiguousarray(w.value.T))

        self._ops.append(back)
        return out

    def conv2d(self, x: Var, w: Var, b: Var, stride: int = 1, padding: str = "same") -> Var:
        value, cols = conv2d_cols(x.value, w.value, b.value, stride, padding)  # type: ignore[arg-type]
        out = self._out(value, (x, w, b), "conv2d")
        B, H, W, Cin = x.value.shape
        k, _, _, Cout = w.value.shape
        pad, _, _ = conv_geometry(H, W, k, stride, padding)  # type: ignore[arg-type]

        def back() -> None:
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(-1, Cout)
            w.accumulate((cols.T @ g2).reshape(w.value.shape))
            b.accumulate(g2.sum(axis=0))
            if x.requires_grad:
                dcols = g2 @ np.ascontiguousarray(w.value.reshape(-1, Cout).T)
                x.accumulate(kernels.col2im(dcols, B, H, W, Cin, k, stride, pad))

        self._ops.append(back)
        return out

    # -- elementwise ------------------------------------------------------

    def relu(self, x: Var) -> Var:
        out = self._out(np.maximum(x.value, 0), (x,), "relu")

        def back() -> None:
            if out.grad is not None:
                x.accumulate(out.grad * (x.value > 0))

        self._ops.append(back)
        return out

    def sigmoid(self, x: Var) -> Var:
        s = sigmoid(x.value)
        out = self._out(s, (x,), "sigmoid")

        def back() -> None:
            if out.grad is not None:
                x.accumulate(out.grad * s * (1 - s))

        self._ops.append(back)
        return out

    def exp(self, x: Var) -> Var:
        with np.errstate(over="ignore"):
            e = np.exp(x.value)
        out = self._out(e, (x,), "exp")

        def back() -> None:
            if out.grad is not None:
                x.accumulate(out.grad * e)

        self._ops.append(back)
        return out

    # -- structure --------------------------------------------------------

    def concat(self, xs: Sequence[Var], axis: int = -1) -> Var:
        if len(xs) == 1:
            return xs[0]
        out = self._out(np.concatenate([v.value for v in xs], axis=axis), xs, "concat")
        sizes = np.cumsum([v.value.shape[axis] for v in xs])[:-1]

        def back() -> None:
            if out.grad is None:
                return
            for v, g in zip(xs, np.split(out.grad, sizes, axis=axis)):
                v.accumulate(g)

        self._ops.append(back)
        return out

    def reshape(self, x: Var, shape: tuple[int, ...]) -> Var:
        out = Var(x.value.reshape(shape), requires_grad=x.requires_grad)
        src_shape = x.value.shape

        def back() -> None:
            if out.grad is not None:
                x.accumulate(out.grad.reshape(src_shape))

        self._ops.append(back)
        return out

    # -- variational pieces ----------------------------------------------

    def reparameterize(self, mu: Var, logvar: Var, eps: np.ndarray) -> Var:
        """``z = mu + exp(logvar / 2) * eps`` with ``eps`` supplied by the caller."""
        if eps.shape != mu.value.shape:
            raise UsageError(f"noise shape {eps.shape} does not match latent shape {mu.value.shape}")
        with np.errstate(over="ignore"):
            std = np.exp(0.5 * logvar.value)
        out = self._out(mu.value + std * eps, (mu, logvar), "reparameterize")

        def back() -> None:
            g = out.grad
            if g is None:
                return
            mu.accumulate(g)
            logvar.accumulate(g * 0.5 * std * eps)

        self._ops.append(back)
        return out

    def bce_sum(self, target: np.ndarray, xhat: Var) -> Var:
        """Per-sample summed binary cross-entropy, ``xhat`` clamped into [1e-6, 1 - 1e-6].

        Returns a (B,) vector.
        """
        p = np.clip(xhat.value, BCE_CLAMP, 1 - BCE_CLAMP)
        ll = target * np.log(p) + (1 - target) * np.log(1 - p)
        out = self._out(-ll.reshape(ll.shape[0], -1).sum(axis=1), (xhat,), "bce")
        inside = (xhat.value >= BCE_CLAMP) & (xhat.value <= 1 - BCE_CLAMP)

        def back() -> None:
            g = out.grad
            if g is None:
                return
            d = (p - target) / (p * (1 - p)) * inside
            xhat.accumulate(d * g.reshape((-1,) + (1,) * (d.ndim - 1)))

        self._ops.append(back)
        return out

    def kl_normal(self, mu: Var, logvar: Var) -> Var:
        """Per-sample KL[N(mu, exp(logvar)) || N(0, I)] in closed form; (B,) vector."""
        var = np.exp(logvar.value)
        out = self._out(0.5 * (mu.value**2 + var - 1 - logvar.value).sum(axis=1), (mu, logvar), "kl")

        def back() -> None:
            g = out.grad
            if g is None:
                return
            g = g[:, None]
            mu.accumulate(g * mu.value)
            logvar.accumulate(g * 0.5 * (var - 1))

        self._ops.append(back)
        return out

    def weighted_mean(self, terms: Sequence[tuple[float, Var]]) -> Var:
        """``mean_b(sum_i w_i * term_i[b])`` for per-sample (B,) terms; returns a scalar Var."""
        B = terms[0][1].value.shape[0]
        total = sum(w * t.value for w, t in terms)
        out = self._out(np.asarray(total.mean()), [t for _, t in terms], "loss")

        def back() -> None:
            g = out.grad
            if g is None:
                return
            for w, t in terms:
                t.accumulate(np.full((B,), w * g / B, dtype=t.value.dtype))

        self._ops.append(back)
        return out
