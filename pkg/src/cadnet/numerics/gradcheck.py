"""Central finite-difference oracle for taped gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cadnet.errors import UsageError
from cadnet.numerics.autodiff import Tape, Var
from cadnet.numerics.params import ParameterStore

LossClosure = Callable[[ParameterStore, Tape], Var]

# below this magnitude the relative error is meaningless and an absolute bound applies
TINY_GRAD = 1e-6
TINY_ABS_TOL = 1e-2


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    n_failed: int
    max_rel_error: float
    max_abs_error: float

    @property
    def passed(self) -> bool:
        return self.n_failed == 0


@dataclass
class GradcheckReport:
    h: float
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def n_checked(self) -> int:
        return sum(p.n_checked for p in self.params)

    @property
    def n_failed(self) -> int:
        return sum(p.n_failed for p in self.params)

    @property
    def pass_fraction(self) -> float:
        return 1.0 - self.n_failed / max(self.n_checked, 1)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"{'parameter':40s} {'checked':>8s} {'failed':>7s} {'max rel err':>12s}"]
        for p in self.params:
            lines.append(f"{p.name:40s} {p.n_checked:8d} {p.n_failed:7d} {p.max_rel_error:12.3e}")
        lines.append(f"pass fraction {self.pass_fraction:.5f} over {self.n_checked} entries")
        return "\n".join(lines)


def compare(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise ``(rel_error, abs_error, ok)``."""
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    tiny = scale < TINY_GRAD
    rel = np.where(tiny, 0.0, abs_err / np.where(tiny, 1.0, scale))
    ok = np.where(tiny, abs_err <= TINY_ABS_TOL, rel <= tol)
    return rel, abs_err, ok


def analytic_grads(loss_fn: LossClosure, store: ParameterStore) -> dict[str, np.ndarray]:
    store.zero_grad()
    tape = Tape()
    loss = loss_fn(store, tape)
    tape.backward(loss)
    store.collect_grads()
    grads = {n: g.copy() for n, g in store.grads.items()}
    store.zero_grad()
    return grads


def _loss_value(loss_fn: LossClosure, store: ParameterStore) -> float:
    return float(loss_fn(store, Tape()).value)


def gradcheck(
    loss_fn: LossClosure,
    store: ParameterStore,
    h: float = 1e-3,
    tol: float = 1e-3,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare taped gradients of ``loss_fn`` with central differences of step ``h``.

    ``loss_fn(store, tape)`` must return a scalar Var and be deterministic: any
    sampling noise has to be frozen by the caller. Best run on a float64 store.
    ``max_entries_per_param`` subsamples large tensors (entries chosen by ``seed``).
    """
    base = _loss_value(loss_fn, store)
    if _loss_value(loss_fn, store) != base:
        raise UsageError("loss closure is not deterministic; freeze its noise before gradcheck")
    grads = analytic_grads(loss_fn, store)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(h=h, tol=tol)
    for name in store:
        p = store.values[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idx = np.sort(rng.choice(flat.size, max_entries_per_param, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = _loss_value(loss_fn, store)
            flat[i] = old - h
            down = _loss_value(loss_fn, store)
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        rel, abs_err, ok = compare(analytic, numeric, tol)
        report.params.append(
            ParamCheck(
                name=name,
                n_checked=int(idx.size),
                n_failed=int((~ok).sum()),
                max_rel_error=float(rel.max(initial=0.0)),
                max_abs_error=float(abs_err.max(initial=0.0)),
            )
        )
    return report
