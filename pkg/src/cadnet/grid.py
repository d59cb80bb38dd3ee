"""Detector-output grids, context records, and the line-delimited dataset format.

Dataset files are UTF-8 text, one JSON object per line. Line 1 is the header::

    {"format": "cadnet-dataset", "format_version": 1, "S": 13, "C": 8, "F": 256,
     "classes": ["car", ...]}

Every following line is one sample with keys in this fixed order:

    id      sample identifier (string)
    point   monitoring point id (string)
    t       time of day, seconds since midnight (float)
    lat     latitude in degrees (float)
    lon     longitude in degrees (float)
    x       non-zero grid entries as [row, col, class, value] with value a float32
    frame   frame activation, base64 of little-endian float32
    gt      ground-truth anomalies as [row, col, class] triples

Floats are written with ``repr`` of the exact value, so a write/read cycle is
bit-exact.
"""

from __future__ import annotations

import base64
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from cadnet.errors import ConfigurationError, DataError, ParseError, VersionError

FORMAT_NAME = "cadnet-dataset"
FORMAT_VERSION = 1
SECONDS_PER_DAY = 86400.0

DEFAULT_CLASSES = ("car", "pedestrian", "van", "truck", "bicycle", "motorbike", "trailer", "bus")
DEFAULT_S = 13
DEFAULT_F = 256

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError(f"duplicate class names in {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown class {name!r}") from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DetectionGrid:
    """S x S x C per-cell class scores in [0, 1]."""

    cells: np.ndarray

    def __post_init__(self) -> None:
        cells = _frozen(self.cells)
        if cells.ndim != 3 or cells.shape[0] != cells.shape[1]:
            raise DataError(f"grid must be S x S x C, got {cells.shape}")
        if cells.size and (cells.min() < 0 or cells.max() > 1 or not np.isfinite(cells).all()):
            raise DataError("grid values must lie in [0, 1]")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def empty(cls, S: int = DEFAULT_S, C: int = len(DEFAULT_CLASSES)) -> "DetectionGrid":
        return cls(np.zeros((S, S, C), dtype=np.float32))

    @property
    def S(self) -> int:
        return self.cells.shape[0]

    @property
    def C(self) -> int:
        return self.cells.shape[2]

    def nonzero(self) -> list[tuple[int, int, int, float]]:
        r, c, k = np.nonzero(self.cells)
        return [(int(a), int(b), int(d), float(self.cells[a, b, d])) for a, b, d in zip(r, c, k)]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DetectionGrid) and np.array_equal(self.cells, other.cells)

    def __hash__(self) -> int:
        return hash(self.cells.tobytes())


@dataclass(frozen=True, eq=False)
class ContextRecord:
    time_of_day: float
    latitude: float
    longitude: float
    frame_activation: np.ndarray

    def __post_init__(self) -> None:
        if not 0.0 <= self.time_of_day < SECONDS_PER_DAY:
            raise DataError(f"time_of_day {self.time_of_day} outside [0, 86400)")
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"longitude {self.longitude} outside [-180, 180]")
        frame = _frozen(self.frame_activation)
        if frame.ndim != 1 or not np.isfinite(frame).all():
            raise DataError("frame_activation must be a finite rank-1 vector")
        object.__setattr__(self, "frame_activation", frame)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ContextRecord)
            and self.time_of_day == other.time_of_day
            and self.latitude == other.latitude
            and self.longitude == other.longitude
            and np.array_equal(self.frame_activation, other.frame_activation)
        )


@dataclass(frozen=True)
class Sample:
    id: str
    grid: DetectionGrid
    context: ContextRecord
    monitoring_point_id: str
    ground_truth: frozenset[Triple] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        gt = frozenset((int(r), int(c), int(k)) for r, c, k in self.ground_truth)
        S, C = self.grid.S, self.grid.C
        for r, c, k in gt:
            if not (0 <= r < S and 0 <= c < S and 0 <= k < C):
                raise DataError(f"ground-truth cell {(r, c, k)} outside {S}x{S}x{C} grid")
        object.__setattr__(self, "ground_truth", gt)


@dataclass(frozen=True)
class RawDetection:
    """One post-decode detector box; offsets are in grid-cell units."""

    row: int
    col: int
    objectness: float
    class_probabilities: tuple[float, ...]
    box: tuple[float, float, float, float] = (0.5, 0.5, 1.0, 1.0)  # centre dx, dy, width, height

    def __post_init__(self) -> None:
        if not 0.0 <= self.objectness <= 1.0:
            raise DataError(f"objectness {self.objectness} outside [0, 1]")
        if any(not 0.0 <= p <= 1.0 for p in self.class_probabilities):
            raise DataError("class probabilities must lie in [0, 1]")

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probabilities))

    def corners(self) -> tuple[float, float, float, float]:
        dx, dy, w, h = self.box
        cx, cy = self.col + dx, self.row + dy
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a: RawDetection, b: RawDetection) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def nms(detections: Sequence[RawDetection], iou_threshold: float = 0.5) -> list[RawDetection]:
    """Greedy per-class non-maximum suppression by descending objectness.

    Ties keep input order. Survivors are returned in input order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].objectness)
    kept: list[int] = []
    for i in order:
        d = detections[i]
        if all(detections[j].label != d.label or iou(detections[j], d) < iou_threshold for j in kept):
            kept.append(i)
    return [detections[i] for i in sorted(kept)]


def build_encoder_input(detections: Iterable[RawDetection], S: int = DEFAULT_S, C: int = len(DEFAULT_CLASSES)) -> DetectionGrid:
    """Encoder input: objectness x class probability per cell, box offsets dropped.

    Several boxes in one cell collapse to the per-class maximum.
    """
    cells = np.zeros((S, S, C), dtype=np.float32)
    for d in detections:
        if not (0 <= d.row < S and 0 <= d.col < S):
            raise DataError(f"detection cell ({d.row}, {d.col}) outside {S}x{S} grid")
        if len(d.class_probabilities) != C:
            raise DataError(f"detection has {len(d.class_probabilities)} class scores, expected {C}")
        scores = np.float32(d.objectness) * np.asarray(d.class_probabilities, dtype=np.float32)
        np.maximum(cells[d.row, d.col], scores, out=cells[d.row, d.col])
    return DetectionGrid(cells)


# -- context features -------------------------------------------------------


def time_features(t: np.ndarray | float) -> np.ndarray:
    """Cyclic (sin, cos) encoding of seconds since midnight; shape (..., 2)."""
    ang = 2.0 * math.pi * np.asarray(t, dtype=np.float64) / SECONDS_PER_DAY
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1)


def gps_features(lat: np.ndarray | float, lon: np.ndarray | float, bounds: Sequence[float]) -> np.ndarray:
    """Min-max normalise (lat, lon) to the box ``(lat_min, lat_max, lon_min, lon_max)``."""
    lat_min, lat_max, lon_min, lon_max = bounds
    lat_n = (np.asarray(lat, dtype=np.float64) - lat_min) / max(lat_max - lat_min, 1e-12)
    lon_n = (np.asarray(lon, dtype=np.float64) - lon_min) / max(lon_max - lon_min, 1e-12)
    return np.stack([lat_n, lon_n], axis=-1)


@dataclass
class Batch:
    """Column-stacked samples ready for the network."""

    x: np.ndarray  # (N, S, S, C)
    time: np.ndarray  # (N,)
    lat: np.ndarray
    lon: np.ndarray
    frame: np.ndarray  # (N, F)
    ids: list[str]
    points: list[str]
    ground_truth: list[frozenset[Triple]]

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray | Sequence[int]) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(
            x=self.x[idx],
            time=self.time[idx],
            lat=self.lat[idx],
            lon=self.lon[idx],
            frame=self.frame[idx],
            ids=[self.ids[i] for i in idx],
            points=[self.points[i] for i in idx],
            ground_truth=[self.ground_truth[i] for i in idx],
        )


def stack(samples: Sequence[Sample], S: int | None = None, C: int | None = None, F: int | None = None) -> Batch:
    if not samples and (S is None or C is None or F is None):
        raise DataError("cannot infer shapes of an empty sample list")
    if samples:
        S, C, F = samples[0].grid.S, samples[0].grid.C, samples[0].context.frame_activation.shape[0]
    return Batch(
        x=np.stack([s.grid.cells for s in samples]) if samples else np.zeros((0, S, S, C), np.float32),
        time=np.array([s.context.time_of_day for s in samples], dtype=np.float64),
        lat=np.array([s.context.latitude for s in samples], dtype=np.float64),
        lon=np.array([s.context.longitude for s in samples], dtype=np.float64),
        frame=np.stack([s.context.frame_activation for s in samples]) if samples else np.zeros((0, F), np.float32),
        ids=[s.id for s in samples],
        points=[s.monitoring_point_id for s in samples],
        ground_truth=[s.ground_truth for s in samples],
    )


# -- serialization ----------------------------------------------------------


@dataclass(frozen=True)
class DatasetHeader:
    S: int = DEFAULT_S
    C: int = len(DEFAULT_CLASSES)
    F: int = DEFAULT_F
    classes: tuple[str, ...] = DEFAULT_CLASSES
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if len(self.classes) != self.C:
            raise ConfigurationError(f"header lists {len(self.classes)} classes but C={self.C}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": FORMAT_NAME,
                "format_version": self.format_version,
                "S": self.S,
                "C": self.C,
                "F": self.F,
                "classes": list(self.classes),
            },
            separators=(",", ":"),
        )


def _encode_f32(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _decode_f32(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s, validate=True), dtype="<f4").astype(np.float32)


def sample_to_json(sample: Sample) -> str:
    rec = {
        "id": sample.id,
        "point": sample.monitoring_point_id,
        "t": float(sample.context.time_of_day),
        "lat": float(sample.context.latitude),
        "lon": float(sample.context.longitude),
        "x": [[r, c, k, v] for r, c, k, v in sample.grid.nonzero()],
        "frame": _encode_f32(sample.context.frame_activation),
        "gt": sorted(list(t) for t in sample.ground_truth),
    }
    return json.dumps(rec, separators=(",", ":"))


def sample_from_json(line: str, header: DatasetHeader, lineno: int | None = None) -> Sample:
    try:
        rec = json.loads(line)
        cells = np.zeros((header.S, header.S, header.C), dtype=np.float32)
        for r, c, k, v in rec["x"]:
            cells[int(r), int(c), int(k)] = np.float32(v)
        frame = _decode_f32(rec["frame"])
        if frame.shape[0] != header.F:
            raise DataError(f"frame length {frame.shape[0]} != F={header.F}")
        return Sample(
            id=str(rec["id"]),
            grid=DetectionGrid(cells),
            context=ContextRecord(float(rec["t"]), float(rec["lat"]), float(rec["lon"]), frame),
            monitoring_point_id=str(rec["point"]),
            ground_truth=frozenset(tuple(int(v) for v in t) for t in rec["gt"]),  # type: ignore[misc]
        )
    except (ValueError, KeyError, TypeError, IndexError, DataError) as exc:
        raise ParseError(f"malformed sample record: {exc}", lineno) from exc


def header_from_json(line: str) -> DatasetHeader:
    try:
        rec = json.loads(line)
    except ValueError as exc:
        raise ParseError(f"malformed header: {exc}", 1) from exc
    if not isinstance(rec, dict) or rec.get("format") != FORMAT_NAME:
        raise ParseError("not a cadnet dataset header", 1)
    if rec.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"dataset format_version {rec.get('format_version')} unsupported (expected {FORMAT_VERSION})")
    try:
        return DatasetHeader(S=int(rec["S"]), C=int(rec["C"]), F=int(rec["F"]), classes=tuple(rec["classes"]))
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise ParseError(f"malformed header: {exc}", 1) from exc


def write_dataset(stream: IO[str], samples: Iterable[Sample], header: DatasetHeader) -> int:
    """Write header and samples; returns the number of samples written."""
    stream.write(header.to_json() + "\n")
    n = 0
    for s in samples:
        if s.grid.S != header.S or s.grid.C != header.C or s.context.frame_activation.shape[0] != header.F:
            raise DataError(f"sample {s.id} does not match header shapes")
        stream.write(sample_to_json(s) + "\n")
        n += 1
    return n


def iter_dataset(stream: IO[str]) -> tuple[DatasetHeader, Iterator[Sample]]:
    """Parse the header eagerly and return a lazy iterator over samples."""
    first = stream.readline()
    if not first:
        raise ParseError("empty file: missing header", 1)
    header = header_from_json(first)

    def records() -> Iterator[Sample]:
        for lineno, line in enumerate(stream, start=2):
            if line.strip():
                yield sample_from_json(line, header, lineno)

    return header, records()


def serialize_dataset(samples: Iterable[Sample], header: DatasetHeader | None = None) -> bytes:
    samples = list(samples)
    if header is None:
        header = header_for(samples)
    buf = io.StringIO()
    write_dataset(buf, samples, header)
    return buf.getvalue().encode("utf-8")


def deserialize_dataset(data: bytes) -> tuple[DatasetHeader, list[Sample]]:
    header, it = iter_dataset(io.StringIO(data.decode("utf-8")))
    return header, list(it)


def header_for(samples: Sequence[Sample], classes: Sequence[str] = DEFAULT_CLASSES) -> DatasetHeader:
    if not samples:
        return DatasetHeader(classes=tuple(classes), C=len(classes))
    s = samples[0]
    return DatasetHeader(S=s.grid.S, C=s.grid.C, F=s.context.frame_activation.shape[0], classes=tuple(classes))


def save_dataset(path: str | Path, samples: Iterable[Sample], header: DatasetHeader) -> int:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        return write_dataset(fh, samples, header)


def load_dataset(path: str | Path) -> tuple[DatasetHeader, list[Sample]]:
    with open(path, encoding="utf-8") as fh:
        header, it = iter_dataset(fh)
        return header, list(it)
