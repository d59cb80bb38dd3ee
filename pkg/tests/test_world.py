from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from cadnet.errors import ConfigurationError
from cadnet.grid import serialize_dataset
from cadnet.world import (
    check_scenario,
    contextual_candidates,
    derive_rng,
    generate_normal,
    inject_contextual_anomalies,
    inject_point_anomalies,
    load_rulebook,
    load_scenario,
    sample_scene,
    split_dataset,
    synth_frame_activation,
)
from cadnet.world.analysis import INPUT_SETS, detectability
from cadnet.world.scenario import ZONE_CODES, Occurrence, scenario_from_dict


@pytest.fixture(scope="module")
def spec():
    return load_scenario()


@pytest.fixture(scope="module")
def rulebook():
    return load_rulebook()


@pytest.fixture(scope="module")
def normal(spec):
    return generate_normal(spec, 600, seed=11)


def raw_rules() -> list[tuple[set[str], str]]:
    """Rules read straight from the bundled JSON, bypassing the RuleBook class."""
    text = resources.files("cadnet.world").joinpath("data/default_rulebook.json").read_text()
    return [(set(r["classes"]), r["zone"]) for r in json.loads(text)["rules"]]


def raw_zone(spec, point_id: str, r: int, c: int) -> str:
    text = resources.files("cadnet.world").joinpath("data/default_scenario.json").read_text()
    raw = json.loads(text)
    layout = next(p["layout"] for p in raw["points"] if p["id"] == point_id)
    return ZONE_CODES[raw["layouts"][layout][r][c]]


# -- scenario ---------------------------------------------------------------


def test_default_scenario_is_rule_consistent(spec, rulebook):
    check_scenario(spec, rulebook)
    assert (spec.S, spec.C, spec.F) == (13, 8, 256)


def test_scenario_placing_forbidden_objects_is_refused(spec, rulebook):
    table = {k: dict(v) for k, v in spec.occurrence.items()}
    table[(spec.points[0].id, "road", "midday")]["pedestrian"] = Occurrence(0.3)
    bad = replace(spec, occurrence=table)
    with pytest.raises(ConfigurationError):
        check_scenario(bad, rulebook)


def test_malformed_scenario_is_refused():
    with pytest.raises((ConfigurationError, KeyError)):
        scenario_from_dict({"points": []})


# -- normal generation ----------------------------------------------------------


def test_generation_is_deterministic(spec):
    a = generate_normal(spec, 40, seed=5)
    b = generate_normal(spec, 40, seed=5)
    assert serialize_dataset(a) == serialize_dataset(b)
    assert serialize_dataset(a) != serialize_dataset(generate_normal(spec, 40, seed=6))


def test_sample_does_not_depend_on_dataset_size(spec):
    assert serialize_dataset(generate_normal(spec, 10, 5)[:5]) == serialize_dataset(generate_normal(spec, 5, 5))


def test_zero_presence_gives_empty_grids(spec):
    for s in generate_normal(spec.with_presence(0.0), 50, seed=1):
        assert not s.grid.cells.any()


def test_normal_samples_respect_rules(normal, spec, rulebook):
    rules = raw_rules()
    for s in normal:
        for r, c, k, _ in s.grid.nonzero():
            if s.grid.cells[r, c, k] < 0.5:
                continue  # confusion mass on a look-alike class
            cls = spec.classes.names[k]
            zone = raw_zone(spec, s.monitoring_point_id, r, c)
            assert not any(cls in classes and zone == z for classes, z in rules), (s.id, cls, zone)
        assert not s.ground_truth


def test_scene_frequencies_match_occurrence_table(spec):
    """Monte Carlo over 50,000 scenes, pooled over points per (zone, band)."""
    n = 50_000
    seen = defaultdict(int)
    visits = defaultdict(int)
    expected = defaultdict(float)
    for i in range(n):
        rng = derive_rng(99, "mc", i)
        p = spec.points[int(rng.integers(len(spec.points)))]
        b = spec.bands[int(rng.integers(len(spec.bands)))]
        placed = {(pl.cls, p.zone_at(pl.row, pl.col)) for pl in sample_scene(spec, p, b, rng)}
        for zone in p.zones_present():
            visits[(zone, b.name)] += 1
            for k, cls in enumerate(spec.classes.names):
                prob = spec.presence(p.id, zone, b.name, cls)
                expected[(zone, b.name, cls)] += prob if prob >= spec.normality_floor else 0.0
                if (k, zone) in placed:
                    seen[(zone, b.name, cls)] += 1
    worst = 0.0
    for key, e in expected.items():
        v = visits[key[:2]]
        worst = max(worst, abs(seen[key] / v - e / v))
    assert worst <= 0.02


def test_frame_activation_determinism_and_separation(spec):
    p = spec.points[0]
    a = synth_frame_activation(p, 0.0, p.altitude_band, None, spec.F, sigma=0.0)
    b = synth_frame_activation(p, 0.0, p.altitude_band, 123, spec.F, sigma=0.0)
    np.testing.assert_array_equal(a, b)
    for p in spec.points:
        h0, h1 = p.heading_set[:2]
        u = synth_frame_activation(p, h0, p.altitude_band, None, spec.F)
        v = synth_frame_activation(p, h1, p.altitude_band, None, spec.F)
        cos = float(u @ v / np.linalg.norm(u) / np.linalg.norm(v))
        assert cos < 0.5


def test_frame_jitter_tail_bound(spec):
    p = spec.points[1]
    base = synth_frame_activation(p, 0.0, p.altitude_band, None, spec.F)
    rng = np.random.default_rng(0)
    dev = np.stack([synth_frame_activation(p, 0.0, p.altitude_band, rng, spec.F, 0.05) - base for _ in range(2000)])
    assert (np.abs(dev) <= 4 * 0.05).mean() >= 0.9999


def test_lookalike_points_share_frame_bases(spec):
    by_look = defaultdict(list)
    for p in spec.points:
        by_look[(p.appearance, p.altitude_band)].append(p)
    twins = [ps for ps in by_look.values() if len(ps) > 1]
    assert twins, "the default scenario should contain points that look alike"
    for ps in twins:
        a, b = ps[:2]
        assert (a.latitude, a.longitude) != (b.latitude, b.longitude)
        np.testing.assert_array_equal(synth_frame_activation(a, 0.0, a.altitude_band, None, spec.F),
                                      synth_frame_activation(b, 0.0, b.altitude_band, None, spec.F))


# -- splits -----------------------------------------------------------------


def test_split_sizes(normal):
    parts = split_dataset(normal[:100], (0.6, 0.1, 0.3), seed=0)
    assert [len(p) for p in parts] == [60, 10, 30]
    ids = [s.id for p in parts for s in p]
    assert sorted(ids) == sorted(s.id for s in normal[:100])
    assert [len(p) for p in split_dataset(normal[:37], (1, 0, 0))] == [37, 0, 0]


def test_split_is_stratified(normal):
    parts = split_dataset(normal, (0.6, 0.1, 0.3), seed=3)
    per_point = defaultdict(int)
    for s in normal:
        per_point[s.monitoring_point_id] += 1
    for frac, part in zip((0.6, 0.1, 0.3), parts):
        got = defaultdict(int)
        for s in part:
            got[s.monitoring_point_id] += 1
        for pid, n in per_point.items():
            assert abs(got[pid] - n * frac) <= 1


def test_split_rejects_bad_fractions(normal):
    with pytest.raises(ConfigurationError):
        split_dataset(normal, (0.5, 0.1, 0.3))


# -- point anomalies ----------------------------------------------------------


def test_point_injection_violates_rules(normal, spec, rulebook):
    rules = raw_rules()
    out, plans = inject_point_anomalies(normal, spec, rulebook, 120, seed=4)
    assert len(out) == len(plans) == 120
    source = {s.id: s for s in normal}
    pairs = set()
    for s, plan in zip(out, plans):
        (r, c, k, score), = plan.injected
        assert s.ground_truth == {(r, c, k)}
        cls = spec.classes.names[k]
        zone = raw_zone(spec, s.monitoring_point_id, r, c)
        pairs.add((cls, zone))
        assert any(cls in classes and zone == z for classes, z in rules)
        assert 0.5 <= s.grid.cells[r, c, k] <= 1.0
        before = source[plan.target_sample_id].grid.cells
        changed = np.argwhere(before != s.grid.cells)
        assert {(int(a), int(b)) for a, b, _ in changed} == {(r, c)}
    assert ("pedestrian", "road") in pairs


def test_point_injection_count_zero_changes_nothing(normal, spec, rulebook):
    before = serialize_dataset(normal)
    assert inject_point_anomalies(normal, spec, rulebook, 0, seed=4) == ([], [])
    assert serialize_dataset(normal) == before


def test_point_injection_deterministic(normal, spec, rulebook):
    a, _ = inject_point_anomalies(normal, spec, rulebook, 30, seed=8)
    b, _ = inject_point_anomalies(normal, spec, rulebook, 30, seed=8)
    assert serialize_dataset(a) == serialize_dataset(b)


# -- contextual anomalies -----------------------------------------------------


def test_night_van_in_parking_is_contextual(spec, rulebook):
    night = spec.band("night")
    with_parking = [p for p in spec.points if "parking" in p.zones_present()]
    assert with_parking
    for p in with_parking:
        assert spec.presence(p.id, "parking", "night", "van") == 0.0
        assert ("van", "parking") in contextual_candidates(spec, rulebook, p.id, night.name, 0.05)


def test_contextual_injection_oracle(normal, spec, rulebook):
    rules = raw_rules()
    threshold = 0.05
    out, plans = inject_contextual_anomalies(normal, spec, rulebook, threshold, 120, seed=4)
    assert len(out) == 120
    kinds = set()
    for s, plan in zip(out, plans):
        (r, c, k, _), = plan.injected
        assert s.ground_truth == {(r, c, k)}
        cls = spec.classes.names[k]
        zone = raw_zone(spec, s.monitoring_point_id, r, c)
        band = spec.band_of(s.context.time_of_day).name
        kinds.add((cls, zone, band))
        assert not any(cls in classes and zone == z for classes, z in rules)
        assert spec.presence(s.monitoring_point_id, zone, band, cls) < threshold
        alibi = [(q.id, b.name) for q in spec.points for b in spec.bands
                 if (q.id, b.name) != (s.monitoring_point_id, band) and zone in q.zones_present()
                 and spec.presence(q.id, zone, b.name, cls) >= spec.normality_floor]
        assert alibi
    assert ("van", "parking", "night") in kinds


def test_contextual_injection_needs_positive_rarity(normal, spec, rulebook):
    assert inject_contextual_anomalies(normal, spec, rulebook, 0.0, 50, seed=1) == ([], [])


# -- information ceiling --------------------------------------------------------


def test_detectability_is_monotone_in_inputs(spec, rulebook):
    ceil = detectability(spec, rulebook)
    assert ceil["full"] == pytest.approx(1.0)
    for a, ia in INPUT_SETS.items():
        for b, ib in INPUT_SETS.items():
            if set(ia) < set(ib):
                assert ceil[a] <= ceil[b] + 1e-12, (a, b)
    assert ceil["wo-gps-time"] < ceil["wo-time"] < ceil["full"]
    assert ceil["wo-gps-time"] < ceil["wo-gps"] < ceil["full"]
