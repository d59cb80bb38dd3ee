from __future__ import annotations

import io
import itertools
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadnet.errors import DataError, ParseError, VersionError
from cadnet.grid import (
    ContextRecord,
    DatasetHeader,
    DetectionGrid,
    RawDetection,
    Sample,
    build_encoder_input,
    deserialize_dataset,
    gps_features,
    header_for,
    iou,
    iter_dataset,
    load_dataset,
    nms,
    save_dataset,
    serialize_dataset,
    stack,
    time_features,
    write_dataset,
)

C = 8


def probs(k: int, p: float = 1.0) -> tuple[float, ...]:
    v = [0.0] * C
    v[k] = p
    return tuple(v)


def make_sample(i: int, rng: np.random.Generator, S: int = 13, F: int = 16, gt=()) -> Sample:
    cells = np.zeros((S, S, C), np.float32)
    mask = rng.random(cells.shape) < 0.03
    cells[mask] = rng.random(mask.sum()).astype(np.float32)
    ctx = ContextRecord(float(rng.uniform(0, 86400)), float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)),
                        rng.normal(size=F).astype(np.float32))
    return Sample(f"s{i}", DetectionGrid(cells), ctx, f"P{i % 3}", frozenset(gt))


# -- encoder input ------------------------------------------------------------


def test_no_detections_gives_empty_grid():
    g = build_encoder_input([], 13, C)
    assert g.cells.shape == (13, 13, C) and not g.cells.any()


def test_objectness_times_class_probability():
    d = RawDetection(2, 3, 0.8, (0.9, 0.1) + (0.0,) * (C - 2))
    g = build_encoder_input([d], 13, C)
    np.testing.assert_allclose(g.cells[2, 3, :2], [0.72, 0.08], rtol=1e-6)
    assert g.cells[2, 3, 2:].sum() == 0
    assert len(g.nonzero()) == 2


def test_detections_stay_in_their_cells():
    g = build_encoder_input([RawDetection(0, 0, 0.9, probs(1)), RawDetection(5, 7, 0.7, probs(4))], 13, C)
    cells_used = {(r, c) for r, c, _, _ in g.nonzero()}
    assert cells_used == {(0, 0), (5, 7)}


def test_encoder_input_validation():
    with pytest.raises(DataError):
        build_encoder_input([RawDetection(13, 0, 0.5, probs(0))], 13, C)
    with pytest.raises(DataError):
        build_encoder_input([RawDetection(0, 0, 0.5, (1.0,))], 13, C)
    with pytest.raises(DataError):
        RawDetection(0, 0, 1.5, probs(0))
    with pytest.raises(DataError):
        DetectionGrid(np.full((2, 2, 1), 1.5))


# -- NMS --------------------------------------------------------------------


def brute_force_nms(dets, t):
    """The unique keep-set that is self-consistent under score-ordered suppression."""
    n = len(dets)

    def suppresses(j, i):
        return dets[j].objectness > dets[i].objectness and dets[j].label == dets[i].label and iou(dets[j], dets[i]) >= t

    found = []
    for r in range(n + 1):
        for keep in itertools.combinations(range(n), r):
            ks = set(keep)
            ok_kept = all(not any(suppresses(j, i) for j in ks) for i in ks)
            ok_gone = all(any(suppresses(j, i) for j in ks) for i in set(range(n)) - ks)
            if ok_kept and ok_gone:
                found.append(sorted(ks))
    assert len(found) == 1
    return [dets[i] for i in found[0]]


def test_nms_single_and_identical():
    d = RawDetection(1, 1, 0.9, probs(0))
    assert nms([d]) == [d]
    lo = RawDetection(1, 1, 0.8, probs(0))
    assert nms([lo, d]) == [d]


def test_nms_three_boxes_hand_computed():
    a = RawDetection(0, 0, 0.9, probs(0), (0.5, 0.5, 2.0, 2.0))
    b = RawDetection(0, 0, 0.8, probs(0), (1.0, 0.5, 2.0, 2.0))  # IoU(a,b) = 3/5 -> suppressed
    c = RawDetection(0, 0, 0.7, probs(0), (1.5, 0.5, 2.0, 2.0))  # IoU(a,c) = 1/3, IoU(b,c) = 3/5
    assert iou(a, b) == pytest.approx(0.6)
    assert iou(a, c) == pytest.approx(1 / 3)
    assert iou(b, c) == pytest.approx(0.6)
    # b would suppress c, but b is itself suppressed first
    assert nms([a, b, c], 0.5) == [a, c] == brute_force_nms([a, b, c], 0.5)


boxes = st.builds(
    lambda r, c, o, k, dx, dy, w, h: RawDetection(r, c, o, probs(k), (dx, dy, w, h)),
    st.integers(0, 2), st.integers(0, 2), st.floats(0.05, 1.0), st.integers(0, 1),
    st.floats(0, 1), st.floats(0, 1), st.floats(0.2, 2.5), st.floats(0.2, 2.5),
)


@given(st.lists(boxes, min_size=0, max_size=6, unique_by=lambda d: d.objectness), st.floats(0.1, 0.9))
@settings(max_examples=150, deadline=None)
def test_nms_matches_exhaustive_oracle(dets, t):
    assert nms(dets, t) == brute_force_nms(dets, t)


# -- context features -------------------------------------------------------


def test_time_features_are_cyclic():
    np.testing.assert_allclose(time_features(0.0), [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(time_features(86399.999), time_features(0.0), atol=1e-6)
    np.testing.assert_allclose(time_features(21600.0), [1.0, 0.0], atol=1e-12)


def test_gps_features_min_max():
    np.testing.assert_allclose(gps_features(10.0, 20.0, (10, 12, 20, 24)), [0.0, 0.0])
    np.testing.assert_allclose(gps_features(11.0, 24.0, (10, 12, 20, 24)), [0.5, 1.0])


# -- serialization ------------------------------------------------------------


def test_empty_dataset_round_trips():
    data = serialize_dataset([])
    assert data.count(b"\n") == 1
    header, samples = deserialize_dataset(data)
    assert samples == [] and header == DatasetHeader()


def test_single_sample_round_trip():
    s = make_sample(0, np.random.default_rng(0), gt=[(1, 2, 3)])
    _, back = deserialize_dataset(serialize_dataset([s]))
    assert back == [s]
    assert back[0].grid.cells.tobytes() == s.grid.cells.tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
@settings(max_examples=30, deadline=None)
def test_round_trip_is_bit_exact(seed, n):
    rng = np.random.default_rng(seed)
    samples = [make_sample(i, rng, S=5, F=4, gt=[(0, 0, i % C)] if i % 2 else []) for i in range(n)]
    blob = serialize_dataset(samples)
    _, back = deserialize_dataset(blob)
    assert back == samples
    assert serialize_dataset(back) == blob


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    samples = [make_sample(i, rng) for i in range(5)]
    header = header_for(samples)
    assert save_dataset(tmp_path / "d.jsonl", samples, header) == 5
    h, back = load_dataset(tmp_path / "d.jsonl")
    assert h == header and back == samples


def test_streaming_memory_stays_flat(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "big.jsonl"
    proto = [make_sample(i, rng, F=256) for i in range(50)]
    header = header_for(proto)
    with open(path, "w", encoding="utf-8") as fh:
        write_dataset(fh, (proto[i % 50] for i in range(10_000)), header)
    size = path.stat().st_size
    tracemalloc.start()
    with open(path, encoding="utf-8") as fh:
        _, it = iter_dataset(fh)
        n = sum(1 for _ in it)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert n == 10_000
    assert peak < size / 20, f"peak {peak} bytes while streaming a {size}-byte file"


def test_parse_errors_carry_line_numbers():
    blob = serialize_dataset([make_sample(0, np.random.default_rng(3))]).decode()
    bad = blob + '{"id": "broken"}\n'
    _, it = iter_dataset(io.StringIO(bad))
    next(it)
    with pytest.raises(ParseError) as err:
        next(it)
    assert err.value.line == 3


def test_header_checks():
    with pytest.raises(ParseError):
        iter_dataset(io.StringIO(""))
    with pytest.raises(ParseError):
        iter_dataset(io.StringIO('{"format": "other"}\n'))
    with pytest.raises(VersionError):
        iter_dataset(io.StringIO('{"format": "cadnet-dataset", "format_version": 99}\n'))


def test_write_rejects_shape_mismatch():
    s = make_sample(0, np.random.default_rng(4), S=5)
    with pytest.raises(DataError):
        serialize_dataset([s], DatasetHeader(S=13, F=16))


def test_sample_and_context_validation():
    rng = np.random.default_rng(5)
    with pytest.raises(DataError):
        ContextRecord(86400.0, 0, 0, np.zeros(3))
    with pytest.raises(DataError):
        ContextRecord(0.0, 91, 0, np.zeros(3))
    with pytest.raises(DataError):
        make_sample(0, rng, S=5, gt=[(5, 0, 0)])


def test_stack_shapes():
    rng = np.random.default_rng(6)
    b = stack([make_sample(i, rng) for i in range(4)])
    assert b.x.shape == (4, 13, 13, C) and b.frame.shape == (4, 16)
    assert len(b.subset([0, 2])) == 2
    with pytest.raises(DataError):
        stack([])
    assert len(stack([], 13, C, 16)) == 0
