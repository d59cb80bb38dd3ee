"""Synthetic aerial-surveillance world: scenarios, rules, generation and anomaly injection."""

from cadnet.world.generate import derive_rng, generate_normal, sample_scene, split_dataset, synth_frame_activation
from cadnet.world.inject import (
    AnomalyInjectionPlan,
    contextual_candidates,
    inject_contextual_anomalies,
    inject_point_anomalies,
)
from cadnet.world.rules import Rule, RuleBook, check_scenario, load_rulebook, violations
from cadnet.world.scenario import ZONES, MonitoringPoint, Occurrence, ScenarioSpec, TimeBand, load_scenario

__all__ = [
    "AnomalyInjectionPlan",
    "MonitoringPoint",
    "Occurrence",
    "Rule",
    "RuleBook",
    "ScenarioSpec",
    "TimeBand",
    "ZONES",
    "check_scenario",
    "contextual_candidates",
    "derive_rng",
    "generate_normal",
    "inject_contextual_anomalies",
    "inject_point_anomalies",
    "load_rulebook",
    "load_scenario",
    "sample_scene",
    "split_dataset",
    "synth_frame_activation",
    "violations",
]
