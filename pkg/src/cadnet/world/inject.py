"""Point and contextual anomaly injection at grid level."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cadnet.grid import DetectionGrid, Sample
from cadnet.world.generate import class_probabilities, derive_rng
from cadnet.world.rules import RuleBook
from cadnet.world.scenario import ScenarioSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnomalyInjectionPlan:
    kind: str  # "point" or "contextual"
    target_sample_id: str
    injected: tuple[tuple[int, int, int, float], ...]  # (row, col, class, score)
    note: str = ""


def _free_cells(sample: Sample, cells: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    x = sample.grid.cells
    return [(r, c) for r, c in cells if not x[r, c].any()]


def _apply(spec: ScenarioSpec, sample: Sample, row: int, col: int, cls: int, rng: np.random.Generator,
           new_id: str) -> tuple[Sample, float]:
    score = spec.noise.objectness(rng)
    probs = np.asarray(class_probabilities(spec, cls, rng), dtype=np.float32)
    cells = sample.grid.cells.copy()
    cells[row, col] = np.maximum(cells[row, col], np.float32(score) * probs)
    out = Sample(
        id=new_id,
        grid=DetectionGrid(cells),
        context=sample.context,
        monitoring_point_id=sample.monitoring_point_id,
        ground_truth=sample.ground_truth | {(row, col, cls)},
    )
    return out, float(cells[row, col, cls])


def _targets(n_samples: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample indices to inject into: a permutation, repeated if ``n`` exceeds the pool."""
    reps = -(-n // n_samples)
    return np.concatenate([rng.permutation(n_samples) for _ in range(reps)])


def inject_point_anomalies(
    dataset: Sequence[Sample],
    spec: ScenarioSpec,
    rulebook: RuleBook,
    n_anomalies: int,
    seed: int,
) -> tuple[list[Sample], list[AnomalyInjectionPlan]]:
    """Return ``n_anomalies`` samples, each with one rule-violating object added.

    A rule is drawn among those whose forbidden zone has a free cell at the
    sample's monitoring point, then a subject class of that rule and a free cell.
    Samples offering no such placement are skipped with a warning.
    """
    if n_anomalies <= 0 or not dataset:
        return [], []
    rng = derive_rng(seed, "inject-point")
    out: list[Sample] = []
    plans: list[AnomalyInjectionPlan] = []
    for idx in _targets(len(dataset), n_anomalies * 4, rng):
        if len(out) == n_anomalies:
            break
        sample = dataset[int(idx)]
        point = spec.point(sample.monitoring_point_id)
        options = [(rule, _free_cells(sample, point.cells_in(rule.zone))) for rule in rulebook.rules]
        options = [(rule, cells) for rule, cells in options if cells]
        if not options:
            logger.warning("no rule-violating placement possible for sample %s; skipped", sample.id)
            continue
        rule, cells = options[int(rng.integers(len(options)))]
        cls_name = sorted(rule.classes)[int(rng.integers(len(rule.classes)))]
        r, c = cells[int(rng.integers(len(cells)))]
        k = spec.classes.index(cls_name)
        new, score = _apply(spec, sample, r, c, k, rng, f"pa{len(out):04d}-{sample.id}")
        out.append(new)
        plans.append(AnomalyInjectionPlan("point", sample.id, ((r, c, k, score),), f"rule {rule.id}"))
    if len(out) < n_anomalies:
        logger.warning("only %d of %d point anomalies could be injected", len(out), n_anomalies)
    return out, plans


def contextual_candidates(spec: ScenarioSpec, rulebook: RuleBook, point_id: str, band: str,
                          rarity_threshold: float) -> list[tuple[str, str]]:
    """(class, zone) pairs that are legal, rare here and now, yet normal in some other context."""
    point = spec.point(point_id)
    out = []
    for zone in point.zones_present():
        for cls in spec.classes.names:
            if not rulebook.is_legal(cls, zone):
                continue
            if spec.presence(point_id, zone, band, cls) >= rarity_threshold:
                continue
            if has_alibi(spec, cls, zone, exclude=(point_id, band)):
                out.append((cls, zone))
    return out


def has_alibi(spec: ScenarioSpec, cls: str, zone: str, exclude: tuple[str, str] | None = None) -> bool:
    """True if the (class, zone) pair is normal at some other (point, band)."""
    for p in spec.points:
        if zone not in p.zones_present():
            continue
        for b in spec.bands:
            if (p.id, b.name) == exclude:
                continue
            if spec.presence(p.id, zone, b.name, cls) >= spec.normality_floor:
                return True
    return False


def inject_contextual_anomalies(
    dataset: Sequence[Sample],
    spec: ScenarioSpec,
    rulebook: RuleBook,
    rarity_threshold: float,
    n_anomalies: int,
    seed: int,
) -> tuple[list[Sample], list[AnomalyInjectionPlan]]:
    """Return ``n_anomalies`` samples, each with one rule-legal but context-rare object added."""
    if n_anomalies <= 0 or not dataset or rarity_threshold <= 0:
        return [], []
    rng = derive_rng(seed, "inject-contextual")
    out: list[Sample] = []
    plans: list[AnomalyInjectionPlan] = []
    for idx in _targets(len(dataset), n_anomalies * 4, rng):
        if len(out) == n_anomalies:
            break
        sample = dataset[int(idx)]
        point = spec.point(sample.monitoring_point_id)
        band = spec.band_of(sample.context.time_of_day).name
        options = []
        for cls, zone in contextual_candidates(spec, rulebook, point.id, band, rarity_threshold):
            cells = _free_cells(sample, point.cells_in(zone))
            if cells:
                options.append((cls, zone, cells))
        if not options:
            logger.warning("no contextual anomaly qualifies for sample %s; skipped", sample.id)
            continue
        cls_name, zone, cells = options[int(rng.integers(len(options)))]
        r, c = cells[int(rng.integers(len(cells)))]
        k = spec.classes.index(cls_name)
        new, score = _apply(spec, sample, r, c, k, rng, f"ca{len(out):04d}-{sample.id}")
        out.append(new)
        plans.append(AnomalyInjectionPlan("contextual", sample.id, ((r, c, k, score),), f"{cls_name} on {zone} at {point.id}/{band}"))
    if len(out) < n_anomalies:
        logger.warning("only %d of %d contextual anomalies could be injected", len(out), n_anomalies)
    return out, plans
