"""Reconstruction-error scoring, the dataset reconstruction metric and accuracy bookkeeping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from cadnet.errors import UsageError

DEFAULT_THRESHOLD = 0.6
DEFAULT_PRESENCE_FLOOR = 0.5

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class AnomalyReport:
    sample_id: str
    error: np.ndarray  # (S, S, C), x - x_hat
    flagged: tuple[tuple[int, int, int, float], ...]  # (row, col, class, error)
    threshold: float
    presence_floor: float

    @property
    def triples(self) -> set[Triple]:
        return {(r, c, k) for r, c, k, _ in self.flagged}

    def to_dict(self, classes: Sequence[str] | None = None) -> dict:
        flags = []
        for r, c, k, e in self.flagged:
            item = {"row": r, "col": c, "class": k, "error": round(e, 6)}
            if classes is not None:
                item["label"] = classes[k]
            flags.append(item)
        return {"id": self.sample_id, "threshold": self.threshold, "presence_floor": self.presence_floor, "flags": flags}


def score(x: np.ndarray, xhat: np.ndarray, presence_floor: float = DEFAULT_PRESENCE_FLOOR,
          threshold: float = DEFAULT_THRESHOLD, sample_id: str = "") -> AnomalyReport:
    """Flag every cell-channel that is present in ``x`` and under-reconstructed by more than ``threshold``."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise UsageError(f"shape mismatch: x {x.shape} vs x_hat {xhat.shape}")
    err = x - xhat
    rows, cols, ks = np.nonzero((x >= presence_floor) & (err > threshold))
    flagged = tuple((int(r), int(c), int(k), float(err[r, c, k])) for r, c, k in zip(rows, cols, ks))
    return AnomalyReport(sample_id, err.astype(np.float32), flagged, float(threshold), float(presence_floor))


def score_batch(x: np.ndarray, xhat: np.ndarray, ids: Sequence[str], presence_floor: float = DEFAULT_PRESENCE_FLOOR,
                threshold: float = DEFAULT_THRESHOLD) -> list[AnomalyReport]:
    return [score(x[i], xhat[i], presence_floor, threshold, ids[i]) for i in range(len(ids))]


def reconstruction_error(x: np.ndarray, xhat: np.ndarray) -> float:
    """Mean over samples of the summed absolute deviation, for stacked ``(N, S, S, C)`` arrays."""
    if x.shape != xhat.shape:
        raise UsageError(f"shape mismatch: x {x.shape} vs x_hat {xhat.shape}")
    if x.shape[0] == 0:
        raise UsageError("reconstruction error of an empty dataset is undefined")
    per_sample = np.abs(x.astype(np.float64) - xhat.astype(np.float64)).reshape(x.shape[0], -1).sum(axis=1)
    return float(per_sample.mean())


def dataset_reconstruction_error(model, dataset) -> float:
    """Reconstruction error of ``model`` (with z = mu) over a list of samples."""
    from cadnet.grid import stack
    from cadnet.model import make_inputs

    if len(dataset) == 0:
        raise UsageError("reconstruction error of an empty dataset is undefined")
    inp = make_inputs(stack(dataset), model.config)
    return reconstruction_error(inp.x, model.reconstruct(inp))


@dataclass(frozen=True)
class Accuracy:
    accuracy: float  # percent
    false_positive_rate: float
    hits: int
    injected: int
    flagged: int
    false_flags: int


def detection_accuracy(reports: Sequence[AnomalyReport], ground_truth: Sequence[Iterable[Triple]]) -> Accuracy:
    """Share of injected triples that were flagged, and share of flags that hit nothing injected."""
    if len(reports) != len(ground_truth):
        raise UsageError(f"{len(reports)} reports but {len(ground_truth)} ground-truth entries")
    hits = injected = flagged = false_flags = 0
    for rep, gt in zip(reports, ground_truth):
        gt = set(gt)
        got = rep.triples
        injected += len(gt)
        hits += len(gt & got)
        flagged += len(got)
        false_flags += len(got - gt)
    if injected == 0:
        raise UsageError("accuracy is undefined without injected anomalies")
    fpr = false_flags / flagged if flagged else 0.0
    return Accuracy(100.0 * hits / injected, fpr, hits, injected, flagged, false_flags)


# -- summaries --------------------------------------------------------------


@dataclass
class EvalRow:
    name: str
    reconstruction_error: float = math.nan
    point_accuracy: float = math.nan
    contextual_accuracy: float = math.nan
    point_fpr: float = math.nan
    contextual_fpr: float = math.nan
    failure: str | None = None
    runs: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.failure is not None

    @property
    def false_positive_rate(self) -> float:
        vals = [v for v in (self.point_fpr, self.contextual_fpr) if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


@dataclass
class EvalSummary:
    rows: list[EvalRow]

    def row(self, name: str) -> EvalRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(r.name == name for r in self.rows)

    def table(self) -> str:
        header = ("Model", "Recon. error", "Point anomaly acc. (%)", "Contextual anomaly acc. (%)")
        lines = []
        for r in self.rows:
            if r.failed:
                cells = ("FAILED",) * 3
            else:
                cells = (f"{r.reconstruction_error:.3f}", f"{r.point_accuracy:.1f}", f"{r.contextual_accuracy:.1f}")
            lines.append((r.name, *cells))
        widths = [max(len(header[i]), *(len(l[i]) for l in lines)) if lines else len(header[i]) for i in range(4)]
        fmt = lambda row: "  ".join(  # noqa: E731
            (row[0].ljust(widths[0]),) + tuple(v.rjust(w) for v, w in zip(row[1:], widths[1:]))
        )
        out = [fmt(header), "  ".join("-" * w for w in widths)]
        out += [fmt(l) for l in lines]
        failures = [r for r in self.rows if r.failed]
        for r in failures:
            out.append(f"! {r.name}: {r.failure}")
        return "\n".join(out)

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {"rows": [{k: clean(v) for k, v in asdict(r).items()} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSummary":
        rows = []
        for r in d["rows"]:
            r = {k: (math.nan if v is None and k not in ("failure",) else v) for k, v in r.items()}
            rows.append(EvalRow(**r))
        return cls(rows)
