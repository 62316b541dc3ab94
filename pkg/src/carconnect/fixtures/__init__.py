"""Loaders for the shipped declarative fixtures.

The package bundles a reference fleet (19 cars whose screening results
reproduce the published per-brand eligibility table, plus two off-year
cars), the VIN registry the aggregator answers from, requirement rules,
per-brand profile config and a small simulated fleet for collection runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Any

from ..analytics import SpeedLimitMap
from ..domain import ProfileRegistry, Vehicle
from ..eligibility import RequirementRule, VinEligibilityTable

FLEET_FIXTURES = ("paper19", "paper19+offyear")


def _read(name: str) -> str:
    return resources.files("carconnect.fixtures").joinpath(name).read_text(encoding="utf-8")


def _load_json(name: str) -> Any:
    return json.loads(_read(name))


@dataclass(frozen=True)
class FleetEntry:
    vehicle: Vehicle
    driver_email: str


def reference_registry() -> ProfileRegistry:
    """Built-in archetypes plus the reference brands mapped onto them."""
    return ProfileRegistry.from_config(_load_json("profiles.json"))


def reference_rules() -> list[RequirementRule]:
    return [RequirementRule.from_json_dict(entry) for entry in _load_json("rules.json")]


def reference_fleet(fixture: str = "paper19") -> list[FleetEntry]:
    if fixture not in FLEET_FIXTURES:
        raise ValueError(f"unknown fleet fixture {fixture!r}; choose from {FLEET_FIXTURES}")
    entries = _load_json("fleet_paper19.json")
    if fixture == "paper19+offyear":
        entries = entries + _load_json("fleet_offyear.json")
    return [
        FleetEntry(vehicle=Vehicle.from_json_dict(e["vehicle"]), driver_email=e["driver_email"])
        for e in entries
    ]


def reference_vin_table() -> VinEligibilityTable:
    return VinEligibilityTable(_load_json("vin_eligibility.json"))


def sim_fleet_entries() -> list[dict[str, Any]]:
    """Raw simulated-vehicle configs; fault windows are day offsets that a
    scenario materializes against its own start time."""
    return _load_json("sim_fleet.json")


def sim_fleet_entry(label: str) -> dict[str, Any]:
    for entry in sim_fleet_entries():
        if entry["label"] == label:
            return entry
    raise KeyError(f"no simulated vehicle labelled {label!r}")


def display_names() -> dict[str, str]:
    return {entry["brand"]: entry.get("display_name", entry["brand"]) for entry in _load_json("profiles.json")}


def speed_limit_map() -> SpeedLimitMap:
    return SpeedLimitMap.from_text(_read("speed_limit_map.txt"))
