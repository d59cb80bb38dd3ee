"""Scenario description: monitoring points, time bands and the class occurrence model.

Scenario files are JSON. The occurrence model is written as per-zone defaults
plus an ordered list of overrides, and expanded at load time into a complete
``(point, zone, band) -> class -> Occurrence`` table::

    "occurrence": {
      "defaults": {"road": {"car": {"p": 0.7, "count": [1, 3]}}, ...},
      "overrides": [
        {"points": ["P3"], "bands": ["*"], "zones": ["road"],
         "classes": {"truck": {"p": 0.5, "count": [1, 2]}}},
        ...
      ]
    }

Later overrides win. ``"*"`` matches every point / band / zone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from cadnet.errors import ConfigurationError
from cadnet.grid import DEFAULT_CLASSES, DEFAULT_F, SECONDS_PER_DAY, ClassVocabulary

ZONES = ("road", "bike_lane", "sidewalk", "parking", "building", "open_land")
ZONE_CODES = {"R": "road", "K": "bike_lane", "W": "sidewalk", "P": "parking", "B": "building", "O": "open_land"}
ALTITUDE_BANDS = ("low", "mid", "high")


@dataclass(frozen=True)
class TimeBand:
    name: str
    start_hour: float
    end_hour: float  # may be smaller than start_hour when the band wraps midnight

    @property
    def duration(self) -> float:
        """Length in seconds."""
        span = (self.end_hour - self.start_hour) % 24.0
        return (span if span > 0 else 24.0) * 3600.0

    def contains(self, t: float) -> bool:
        h = (t / 3600.0) % 24.0
        if self.start_hour <= self.end_hour:
            return self.start_hour <= h < self.end_hour
        return h >= self.start_hour or h < self.end_hour

    def sample(self, rng: np.random.Generator) -> float:
        t = (self.start_hour * 3600.0 + rng.random() * self.duration) % SECONDS_PER_DAY
        return float(t)


@dataclass(frozen=True)
class MonitoringPoint:
    id: str
    latitude: float
    longitude: float
    altitude_band: str
    heading_set: tuple[float, ...]
    background_layout: tuple[str, ...]  # S strings of zone codes, one per grid row
    appearance: str  # points that look alike from the air share this tag

    def __post_init__(self) -> None:
        S = len(self.background_layout)
        if any(len(row) != S for row in self.background_layout):
            raise ConfigurationError(f"layout of point {self.id} is not square")
        bad = {ch for row in self.background_layout for ch in row} - set(ZONE_CODES)
        if bad:
            raise ConfigurationError(f"layout of point {self.id} uses unknown zone codes {sorted(bad)}")
        if self.altitude_band not in ALTITUDE_BANDS:
            raise ConfigurationError(f"point {self.id}: altitude_band must be one of {ALTITUDE_BANDS}")
        if not self.heading_set:
            raise ConfigurationError(f"point {self.id} needs at least one heading")

    @property
    def S(self) -> int:
        return len(self.background_layout)

    def zone_map(self) -> np.ndarray:
        """(S, S) array of zone indices into ``ZONES``."""
        return np.array([[ZONES.index(ZONE_CODES[ch]) for ch in row] for row in self.background_layout], dtype=np.int8)

    def zone_at(self, row: int, col: int) -> str:
        return ZONE_CODES[self.background_layout[row][col]]

    def cells_in(self, zone: str) -> list[tuple[int, int]]:
        code = next(k for k, v in ZONE_CODES.items() if v == zone)
        return [(r, c) for r, row in enumerate(self.background_layout) for c, ch in enumerate(row) if ch == code]

    def zones_present(self) -> list[str]:
        seen = {ZONE_CODES[ch] for row in self.background_layout for ch in row}
        return [z for z in ZONES if z in seen]


@dataclass(frozen=True)
class Occurrence:
    p: float
    count: tuple[int, int] = (1, 1)

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"presence probability {self.p} outside [0, 1]")
        lo, hi = self.count
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"bad count range {self.count}")


@dataclass(frozen=True)
class DetectorNoise:
    objectness_mean: float = 0.85
    objectness_std: float = 0.1
    objectness_clip: tuple[float, float] = (0.65, 1.0)
    dropout: float = 0.05
    confusion_rate: float = 0.1
    confusion_max: float = 0.1
    duplicate_rate: float = 0.2
    nms_iou: float = 0.5
    frame_jitter: float = 0.05
    gps_jitter_deg: float = 1e-5

    def objectness(self, rng: np.random.Generator) -> float:
        lo, hi = self.objectness_clip
        return float(np.clip(rng.normal(self.objectness_mean, self.objectness_std), lo, hi))


OccurrenceTable = Mapping[tuple[str, str, str], Mapping[str, Occurrence]]


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    points: tuple[MonitoringPoint, ...]
    bands: tuple[TimeBand, ...]
    occurrence: OccurrenceTable
    classes: ClassVocabulary = ClassVocabulary()
    F: int = DEFAULT_F
    normality_floor: float = 0.05
    confusable: Mapping[str, str] = field(default_factory=dict)
    noise: DetectorNoise = DetectorNoise()
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.points:
            raise ConfigurationError("scenario has no monitoring points")
        S = {p.S for p in self.points}
        if len(S) != 1:
            raise ConfigurationError(f"monitoring points disagree on grid size: {sorted(S)}")
        ids = [p.id for p in self.points]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate monitoring point ids")
        for p in self.points:
            for z in ZONES:
                for b in self.bands:
                    if (p.id, z, b.name) not in self.occurrence:
                        raise ConfigurationError(f"occurrence undefined for ({p.id}, {z}, {b.name})")

    @property
    def S(self) -> int:
        return self.points[0].S

    @property
    def C(self) -> int:
        return len(self.classes)

    def point(self, point_id: str) -> MonitoringPoint:
        for p in self.points:
            if p.id == point_id:
                return p
        raise KeyError(point_id)

    def band(self, name: str) -> TimeBand:
        for b in self.bands:
            if b.name == name:
                return b
        raise KeyError(name)

    def band_of(self, t: float) -> TimeBand:
        for b in self.bands:
            if b.contains(t):
                return b
        raise ConfigurationError(f"time {t} not covered by any band")

    def presence(self, point_id: str, zone: str, band: str, cls: str) -> float:
        occ = self.occurrence[(point_id, zone, band)].get(cls)
        return occ.p if occ is not None else 0.0

    def gps_bounds(self, margin: float = 0.1) -> tuple[float, float, float, float]:
        """Bounding box of all points, widened by ``margin`` of its extent on each side."""
        lats = [p.latitude for p in self.points]
        lons = [p.longitude for p in self.points]
        dlat = max(max(lats) - min(lats), 1e-4) * margin
        dlon = max(max(lons) - min(lons), 1e-4) * margin
        return (min(lats) - dlat, max(lats) + dlat, min(lons) - dlon, max(lons) + dlon)

    def with_presence(self, p: float) -> "ScenarioSpec":
        """Copy with every presence probability replaced by ``p`` (used for degenerate tests)."""
        table = {key: {c: Occurrence(p, o.count) for c, o in v.items()} for key, v in self.occurrence.items()}
        return ScenarioSpec(self.name, self.points, self.bands, table, self.classes, self.F,
                            self.normality_floor, self.confusable, self.noise, self.seed)


def _match(sel: Sequence[str], value: str) -> bool:
    return "*" in sel or value in sel


def _occ(raw: Mapping[str, Any]) -> Occurrence:
    count = raw.get("count", [1, 1])
    return Occurrence(float(raw["p"]), (int(count[0]), int(count[1])))


def expand_occurrence(raw: Mapping[str, Any], points: Sequence[MonitoringPoint], bands: Sequence[TimeBand],
                      classes: ClassVocabulary) -> dict[tuple[str, str, str], dict[str, Occurrence]]:
    defaults = raw.get("defaults", {})
    for z in defaults:
        if z not in ZONES:
            raise ConfigurationError(f"unknown zone {z!r} in occurrence defaults")
    table: dict[tuple[str, str, str], dict[str, Occurrence]] = {}
    for p in points:
        for z in ZONES:
            for b in bands:
                table[(p.id, z, b.name)] = {c: _occ(v) for c, v in defaults.get(z, {}).items()}
    for i, ov in enumerate(raw.get("overrides", [])):
        for c in ov["classes"]:
            classes.index(c)
        for z in ov["zones"]:
            if z != "*" and z not in ZONES:
                raise ConfigurationError(f"override {i}: unknown zone {z!r}")
        for p in points:
            if not _match(ov["points"], p.id):
                continue
            for z in ZONES:
                if not _match(ov["zones"], z):
                    continue
                for b in bands:
                    if not _match(ov["bands"], b.name):
                        continue
                    cell = table[(p.id, z, b.name)]
                    for c, v in ov["classes"].items():
                        cell[c] = _occ(v)
    return table


def scenario_from_dict(raw: Mapping[str, Any]) -> ScenarioSpec:
    try:
        classes = ClassVocabulary(tuple(raw.get("classes", DEFAULT_CLASSES)))
        layouts = raw["layouts"]
        points = tuple(
            MonitoringPoint(
                id=p["id"],
                latitude=float(p["latitude"]),
                longitude=float(p["longitude"]),
                altitude_band=p["altitude_band"],
                heading_set=tuple(float(h) for h in p["headings"]),
                background_layout=tuple(layouts[p["layout"]]),
                appearance=p.get("appearance", p["layout"]),
            )
            for p in raw["points"]
        )
        bands = tuple(TimeBand(b["name"], float(b["start_hour"]), float(b["end_hour"])) for b in raw["time_bands"])
        noise = DetectorNoise(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.get("detector", {}).items()})
        table = expand_occurrence(raw["occurrence"], points, bands, classes)
        spec = ScenarioSpec(
            name=raw.get("name", "scenario"),
            points=points,
            bands=bands,
            occurrence=table,
            classes=classes,
            F=int(raw.get("F", DEFAULT_F)),
            normality_floor=float(raw.get("normality_floor", 0.05)),
            confusable=dict(raw.get("confusable", {})),
            noise=noise,
            seed=int(raw.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"malformed scenario: {exc!r}") from exc
    _check_band_cover(spec.bands)
    return spec


def _check_band_cover(bands: Sequence[TimeBand]) -> None:
    total = sum(b.duration for b in bands)
    if abs(total - SECONDS_PER_DAY) > 1e-6:
        raise ConfigurationError(f"time bands cover {total / 3600:.2f} h, expected 24 h")


def load_scenario(path: str | Path | None = None) -> ScenarioSpec:
    """Load a scenario file; ``None`` loads the bundled default scenario."""
    if path is None:
        text = resources.files("cadnet.world").joinpath("data/default_scenario.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except ValueError as exc:
        raise ConfigurationError(f"scenario is not valid JSON: {exc}") from exc
    return scenario_from_dict(raw)
