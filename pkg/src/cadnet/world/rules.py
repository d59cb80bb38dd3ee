"""Context-free traffic rules and the evaluator that checks grids against them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from cadnet.errors import ConfigurationError
from cadnet.grid import ClassVocabulary
from cadnet.world.scenario import ZONES, MonitoringPoint, ScenarioSpec

N_RULES = 12
N_VEHICLE_RULES = 8
N_PEDESTRIAN_RULES = 4


@dataclass(frozen=True)
class Rule:
    id: str
    category: str  # "vehicle" or "pedestrian"
    classes: frozenset[str]
    zone: str
    description: str

    def forbids(self, cls: str, zone: str) -> bool:
        return zone == self.zone and cls in self.classes


@dataclass(frozen=True)
class RuleBook:
    rules: tuple[Rule, ...]

    def __post_init__(self) -> None:
        if len(self.rules) != N_RULES:
            raise ConfigurationError(f"rulebook must hold exactly {N_RULES} rules, got {len(self.rules)}")
        n_vehicle = sum(r.category == "vehicle" for r in self.rules)
        n_ped = sum(r.category == "pedestrian" for r in self.rules)
        if (n_vehicle, n_ped) != (N_VEHICLE_RULES, N_PEDESTRIAN_RULES):
            raise ConfigurationError(f"rulebook must split {N_VEHICLE_RULES}/{N_PEDESTRIAN_RULES}, got {n_vehicle}/{n_ped}")
        for r in self.rules:
            if r.zone not in ZONES:
                raise ConfigurationError(f"rule {r.id}: unknown zone {r.zone!r}")
        if len({r.id for r in self.rules}) != len(self.rules):
            raise ConfigurationError("duplicate rule ids")

    def violated(self, cls: str, zone: str) -> list[Rule]:
        return [r for r in self.rules if r.forbids(cls, zone)]

    def is_legal(self, cls: str, zone: str) -> bool:
        return not self.violated(cls, zone)

    def check_classes(self, vocab: ClassVocabulary) -> None:
        for r in self.rules:
            for c in r.classes:
                vocab.index(c)


def rulebook_from_dict(raw: dict) -> RuleBook:
    try:
        return RuleBook(
            tuple(
                Rule(
                    id=r["id"],
                    category=r["category"],
                    classes=frozenset(r["classes"]),
                    zone=r["zone"],
                    description=r.get("description", ""),
                )
                for r in raw["rules"]
            )
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed rulebook: {exc!r}") from exc


def load_rulebook(path: str | Path | None = None) -> RuleBook:
    if path is None:
        text = resources.files("cadnet.world").joinpath("data/default_rulebook.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        return rulebook_from_dict(json.loads(text))
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"rulebook is not valid JSON: {exc}") from exc


def violations(cells: np.ndarray, point: MonitoringPoint, rulebook: RuleBook, classes: ClassVocabulary,
               presence_floor: float = 0.0) -> set[tuple[int, int, int]]:
    """Every (row, col, class) with a score above ``presence_floor`` that breaks a rule."""
    out = set()
    rows, cols, ks = np.nonzero(cells > presence_floor)
    for r, c, k in zip(rows, cols, ks):
        if rulebook.violated(classes.names[k], point.zone_at(int(r), int(c))):
            out.add((int(r), int(c), int(k)))
    return out


def check_scenario(spec: ScenarioSpec, rulebook: RuleBook) -> None:
    """Refuse scenarios whose normal occurrence model would place rule-breaking objects."""
    rulebook.check_classes(spec.classes)
    for (pid, zone, band), occ in spec.occurrence.items():
        for cls, o in occ.items():
            if o.p > 0 and not rulebook.is_legal(cls, zone):
                raise ConfigurationError(f"scenario places {cls} on {zone} at ({pid}, {band}) but a rule forbids it")


def forbidden_pairs(rulebook: RuleBook) -> Iterable[tuple[str, str]]:
    for r in rulebook.rules:
        for c in sorted(r.classes):
            yield c, r.zone
