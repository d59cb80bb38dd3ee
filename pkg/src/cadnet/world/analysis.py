"""What each context input can reveal, computed from the scenario alone.

For a contextual anomaly (class k at cell r,c of point P during band T), a model
that observes only some of {gps, time, frame} cannot tell P/T apart from every
other (point, band) state that shares those observations. If k is normal at
(r, c) in any of those aliased states, no amount of training lets the model
flag it reliably. :func:`detectability` enumerates this exactly over the
injector's sampling distribution, giving an upper bound per input set that
ignores cues leaking through the grid itself.
"""

from __future__ import annotations

from typing import Iterable

from cadnet.world.inject import contextual_candidates
from cadnet.world.rules import RuleBook
from cadnet.world.scenario import MonitoringPoint, ScenarioSpec

INPUT_SETS = {
    "full": ("gps", "time", "frame"),
    "wo-gps-time": ("frame",),
    "wo-time": ("gps", "frame"),
    "wo-gps": ("time", "frame"),
    "wo-frame": ("gps", "time"),
    "no-context": (),
}


def _aliases(spec: ScenarioSpec, point: MonitoringPoint, band: str, inputs: Iterable[str]) -> list[tuple[MonitoringPoint, str]]:
    inputs = set(inputs)
    out = []
    for q in spec.points:
        if "gps" in inputs and (q.latitude, q.longitude) != (point.latitude, point.longitude):
            continue
        if "frame" in inputs and (q.appearance, q.altitude_band) != (point.appearance, point.altitude_band):
            continue
        for b in spec.bands:
            if "time" in inputs and b.name != band:
                continue
            out.append((q, b.name))
    return out


def detectability(spec: ScenarioSpec, rulebook: RuleBook, rarity_threshold: float = 0.05) -> dict[str, float]:
    """Fraction of contextual anomalies that are unambiguous under each input set."""
    result = {}
    for name, inputs in INPUT_SETS.items():
        total = 0.0
        hit = 0.0
        for p in spec.points:
            for b in spec.bands:
                cands = contextual_candidates(spec, rulebook, p.id, b.name, rarity_threshold)
                if not cands:
                    continue
                aliases = _aliases(spec, p, b.name, inputs)
                w_state = 1.0 / (len(spec.points) * len(spec.bands))
                for cls, zone in cands:
                    cells = p.cells_in(zone)
                    w = w_state / len(cands) / len(cells)
                    for r, c in cells:
                        total += w
                        normal_somewhere = any(
                            spec.presence(q.id, q.zone_at(r, c), qb, cls) >= spec.normality_floor for q, qb in aliases
                        )
                        if not normal_somewhere:
                            hit += w
        result[name] = hit / total if total else float("nan")
    return result
