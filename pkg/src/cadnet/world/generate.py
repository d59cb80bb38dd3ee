"""Seeded generation of normal samples from a scenario.

Every sample draws from its own generator derived from ``(seed, stream, index)``,
so a sample does not depend on how many others were generated before it and
generation can be split across workers without changing the result.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cadnet.errors import ConfigurationError
from cadnet.grid import ContextRecord, RawDetection, Sample, build_encoder_input, nms
from cadnet.world.scenario import ZONES, MonitoringPoint, ScenarioSpec, TimeBand

FRAME_BASE_SEED = 0x5EED_F2A3


def derive_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Independent generator for a named sub-stream (``data``, ``init``, ``noise``, ...)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(stream.encode()), int(index)))
    return np.random.default_rng(ss)


# -- frame activations ------------------------------------------------------


def frame_base(point: MonitoringPoint, heading: float, altitude_band: str, F: int) -> np.ndarray:
    """Deterministic appearance vector for a (view, heading, altitude) triple.

    The vector is a fixed Gaussian code indexed by the identifiers, so distinct
    triples get (nearly) orthogonal codes. The view is the point's appearance tag:
    two points that look alike from the air produce the same base vector.
    """
    key = f"{point.appearance}|{heading:.3f}|{altitude_band}".encode()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=FRAME_BASE_SEED, spawn_key=(zlib.crc32(key),)))
    return rng.standard_normal(F).astype(np.float32)


def synth_frame_activation(
    point: MonitoringPoint,
    heading: float,
    altitude_band: str,
    noise_seed: int | np.random.Generator | None,
    F: int = 256,
    sigma: float = 0.05,
) -> np.ndarray:
    """Base vector plus N(0, sigma^2) jitter; ``noise_seed=None`` or ``sigma=0`` gives the bare base."""
    base = frame_base(point, heading, altitude_band, F)
    if noise_seed is None or sigma == 0:
        return base
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
    return (base + rng.normal(0.0, sigma, F)).astype(np.float32)


# -- scenes -----------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    row: int
    col: int
    cls: int


def sample_scene(spec: ScenarioSpec, point: MonitoringPoint, band: TimeBand, rng: np.random.Generator) -> list[Placement]:
    """Place ground-truth objects: at most one object per cell.

    For each (zone, class) with presence probability at or above the normality
    floor, the class appears with that probability and then occupies a count
    of distinct free cells of the zone.
    """
    occupied: set[tuple[int, int]] = set()
    out: list[Placement] = []
    for zone in point.zones_present():
        cells = point.cells_in(zone)
        occ = spec.occurrence[(point.id, zone, band.name)]
        for k, cls in enumerate(spec.classes.names):
            o = occ.get(cls)
            if o is None or o.p < spec.normality_floor or o.p == 0:
                continue
            if rng.random() >= o.p:
                continue
            n = int(rng.integers(o.count[0], o.count[1] + 1))
            free = [c for c in cells if c not in occupied]
            if not free:
                continue
            pick = rng.choice(len(free), size=min(n, len(free)), replace=False)
            for i in sorted(pick):
                r, c = free[i]
                occupied.add((r, c))
                out.append(Placement(r, c, k))
    return out


def class_probabilities(spec: ScenarioSpec, cls: int, rng: np.random.Generator) -> tuple[float, ...]:
    probs = [0.0] * spec.C
    probs[cls] = 1.0
    name = spec.classes.names[cls]
    if name in spec.confusable and rng.random() < spec.noise.confusion_rate:
        delta = float(rng.uniform(0.0, spec.noise.confusion_max))
        probs[cls] = 1.0 - delta
        probs[spec.classes.index(spec.confusable[name])] = delta
    return tuple(probs)


def detect(spec: ScenarioSpec, placements: Sequence[Placement], rng: np.random.Generator) -> list[RawDetection]:
    """Simulated detector output for a scene, before NMS.

    Objects drop out with the configured rate; survivors get clipped-normal
    objectness, mostly one-hot class scores, and occasionally a weaker duplicate box.
    """
    noise = spec.noise
    dets: list[RawDetection] = []
    for pl in placements:
        if rng.random() < noise.dropout:
            continue
        obj = noise.objectness(rng)
        probs = class_probabilities(spec, pl.cls, rng)
        box = (float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.6, 1.0)), float(rng.uniform(0.6, 1.0)))
        dets.append(RawDetection(pl.row, pl.col, obj, probs, box))
        if rng.random() < noise.duplicate_rate:
            jitter = rng.uniform(-0.05, 0.05, 2)
            dup_box = (box[0] + float(jitter[0]), box[1] + float(jitter[1]), box[2], box[3])
            dets.append(RawDetection(pl.row, pl.col, obj * float(rng.uniform(0.5, 0.95)), probs, dup_box))
    return dets


def render_sample(spec: ScenarioSpec, sample_id: str, point: MonitoringPoint, band: TimeBand,
                  rng: np.random.Generator) -> Sample:
    t = band.sample(rng)
    heading = float(point.heading_set[int(rng.integers(len(point.heading_set)))])
    frame = synth_frame_activation(point, heading, point.altitude_band, rng, spec.F, spec.noise.frame_jitter)
    placements = sample_scene(spec, point, band, rng)
    dets = nms(detect(spec, placements, rng), spec.noise.nms_iou)
    grid = build_encoder_input(dets, spec.S, spec.C)
    lat = point.latitude + float(rng.normal(0.0, spec.noise.gps_jitter_deg))
    lon = point.longitude + float(rng.normal(0.0, spec.noise.gps_jitter_deg))
    return Sample(sample_id, grid, ContextRecord(t, lat, lon, frame), point.id)


def generate_normal(spec: ScenarioSpec, n: int, seed: int, prefix: str = "n") -> list[Sample]:
    """``n`` anomaly-free samples; a pure function of ``(spec, n, seed)``.

    Points are drawn uniformly, then a time band uniformly, then a time inside it.
    """
    out = []
    for i in range(n):
        rng = derive_rng(seed, "data", i)
        point = spec.points[int(rng.integers(len(spec.points)))]
        band = spec.bands[int(rng.integers(len(spec.bands)))]
        out.append(render_sample(spec, f"{prefix}{i:06d}", point, band, rng))
    return out


# -- splits -----------------------------------------------------------------


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    ideal = [total * f for f in fractions]
    counts = [int(np.floor(v)) for v in ideal]
    order = sorted(range(len(fractions)), key=lambda j: (-(ideal[j] - counts[j]), j))
    for j in order[: total - sum(counts)]:
        counts[j] += 1
    return counts


def split_counts(per_point: Sequence[int], fractions: Sequence[float]) -> list[list[int]]:
    """Integer split table whose column totals match the global largest-remainder split
    and whose entries are each within one of ``n_point * fraction``."""
    targets = _largest_remainder(sum(per_point), fractions)
    table = [[int(np.floor(n * f)) for f in fractions] for n in per_point]
    row_need = [n - sum(row) for n, row in zip(per_point, table)]
    col_need = [t - sum(table[p][j] for p in range(len(per_point))) for j, t in enumerate(targets)]
    bumped: set[tuple[int, int]] = set()
    while sum(row_need) > 0:
        p = max(range(len(per_point)), key=lambda i: (row_need[i], -i))
        cands = [j for j in range(len(fractions)) if col_need[j] > 0 and (p, j) not in bumped]
        if not cands:
            raise ConfigurationError("could not apportion split")  # cannot happen for valid fractions
        frac = lambda j: per_point[p] * fractions[j] - np.floor(per_point[p] * fractions[j])  # noqa: E731
        j = max(cands, key=lambda j: (col_need[j], frac(j), -j))
        table[p][j] += 1
        bumped.add((p, j))
        row_need[p] -= 1
        col_need[j] -= 1
    return table


def split_dataset(samples: Sequence[Sample], fractions: Sequence[float] = (0.6, 0.1, 0.3),
                  seed: int = 0) -> tuple[list[Sample], ...]:
    """Disjoint, exhaustive partition stratified by monitoring point.

    Each part keeps the input order of its members.
    """
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    points = sorted({s.monitoring_point_id for s in samples})
    members = {p: [i for i, s in enumerate(samples) if s.monitoring_point_id == p] for p in points}
    table = split_counts([len(members[p]) for p in points], fractions)
    assign = np.empty(len(samples), dtype=np.intp)
    rng = derive_rng(seed, "split")
    for p, counts in zip(points, table):
        idx = np.asarray(members[p], dtype=np.intp)
        idx = idx[rng.permutation(idx.size)]
        start = 0
        for j, n in enumerate(counts):
            assign[idx[start : start + n]] = j
            start += n
    return tuple([s for s, a in zip(samples, assign) if a == j] for j in range(len(fractions)))


def zone_index(name: str) -> int:
    return ZONES.index(name)
