"""Two-step connectability screening: requirement check, then VIN check.

The requirement check is a pure evaluation of declarative per-brand rules
(models, production year, purchase country, fidelity program). Vehicles
that pass move on to a VIN check against the aggregator: either an
immediate API lookup or a simulated manual review that resolves after a
configurable number of business days.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

from .domain import CarConnectError, Vehicle, Vin, VinCheckMethod, parse_rfc3339, rfc3339
from .timebase import EventEngine, add_business_days

MIN_PRODUCTION_YEAR_DEFAULT = 2018  # embedded-connectivity mandate cutoff


class NoRuleForBrand(CarConnectError):
    pass


class RequirementNotChecked(CarConnectError):
    """VIN check attempted before (or despite a failed) requirement check."""


class UnknownVinAtOem(CarConnectError):
    """The aggregator has no record of this VIN."""


class PendingChecksRemain(CarConnectError):
    """Report requested while manual reviews are still unresolved."""


class VinCheckState(str, Enum):
    PENDING = "pending"
    ELIGIBLE = "eligible"
    NOT_ELIGIBLE = "not_eligible"


@dataclass(frozen=True)
class RequirementRule:
    """One brand's connectability conditions. Wildcards are empty sets."""

    brand: str
    allowed_models: frozenset[str] = frozenset()  # empty = any model
    min_production_year: int = MIN_PRODUCTION_YEAR_DEFAULT
    allowed_countries: frozenset[str] = frozenset()  # empty = any country
    requires_fidelity_program: bool = False

    def matches(self, vehicle: Vehicle) -> bool:
        if vehicle.brand != self.brand:
            return False
        if self.allowed_models and vehicle.model not in self.allowed_models:
            return False
        if vehicle.production_year < self.min_production_year:
            return False
        if self.allowed_countries and vehicle.purchase_country not in self.allowed_countries:
            return False
        if self.requires_fidelity_program and not vehicle.fidelity_program_member:
            return False
        return True

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "brand": self.brand,
            "allowed_models": sorted(self.allowed_models),
            "min_production_year": self.min_production_year,
            "allowed_countries": sorted(self.allowed_countries),
            "requires_fidelity_program": self.requires_fidelity_program,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "RequirementRule":
        return cls(
            brand=payload["brand"],
            allowed_models=frozenset(payload.get("allowed_models", ())),
            min_production_year=int(payload.get("min_production_year", MIN_PRODUCTION_YEAR_DEFAULT)),
            allowed_countries=frozenset(payload.get("allowed_countries", ())),
            requires_fidelity_program=bool(payload.get("requires_fidelity_program", False)),
        )


def requirement_check(vehicle: Vehicle, rules: Sequence[RequirementRule]) -> bool:
    """True iff some rule for the vehicle's brand matches on every clause."""
    brand_rules = [rule for rule in rules if rule.brand == vehicle.brand]
    if not brand_rules:
        raise NoRuleForBrand(f"no requirement rule for brand {vehicle.brand!r}")
    return any(rule.matches(vehicle) for rule in brand_rules)


@dataclass(frozen=True)
class EligibilityOutcome:
    vin: Vin
    requirement_ok: bool
    vin_check: VinCheckState
    checked_at: dt.datetime
    method: Optional[VinCheckMethod] = None

    def __post_init__(self) -> None:
        if self.vin_check is not VinCheckState.PENDING and not self.requirement_ok:
            raise ValueError("vin_check may resolve only after the requirement check passed")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin.value,
            "requirement_ok": self.requirement_ok,
            "vin_check": self.vin_check.value,
            "checked_at": rfc3339(self.checked_at),
            "method": self.method.value if self.method else None,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "EligibilityOutcome":
        return cls(
            vin=Vin(payload["vin"]),
            requirement_ok=bool(payload["requirement_ok"]),
            vin_check=VinCheckState(payload["vin_check"]),
            checked_at=parse_rfc3339(payload["checked_at"]),
            method=VinCheckMethod(payload["method"]) if payload.get("method") else None,
        )


class VinEligibilityTable:
    """Aggregator-side VIN registry: vin -> connectable yes/no."""

    def __init__(self, entries: Mapping[str, bool]) -> None:
        self._entries = dict(entries)

    def lookup(self, vin: Vin) -> bool:
        try:
            return self._entries[vin.value]
        except KeyError:
            raise UnknownVinAtOem(f"VIN {vin} unknown at the aggregator") from None

    def __contains__(self, vin: Vin) -> bool:
        return vin.value in self._entries


class EligibilityService:
    """Runs the sequential pipeline and keeps one outcome per VIN.

    Manual reviews resolve through the event engine after
    `manual_review_business_days`, so wall-clock time never enters; a
    pending outcome transitions exactly once.
    """

    def __init__(
        self,
        rules: Sequence[RequirementRule],
        table: VinEligibilityTable,
        engine: EventEngine,
        manual_review_business_days: int = 2,
    ) -> None:
        self.rules = list(rules)
        self.table = table
        self.engine = engine
        self.manual_review_business_days = manual_review_business_days
        self._outcomes: dict[str, EligibilityOutcome] = {}

    def outcome(self, vin: Vin) -> Optional[EligibilityOutcome]:
        return self._outcomes.get(vin.value)

    def check_requirements(self, vehicle: Vehicle) -> bool:
        ok = requirement_check(vehicle, self.rules)
        now = self.engine.clock.now()
        self._outcomes[vehicle.vin.value] = EligibilityOutcome(
            vin=vehicle.vin,
            requirement_ok=ok,
            vin_check=VinCheckState.PENDING,
            checked_at=now,
        )
        return ok

    def vin_check(self, vin: Vin, method: VinCheckMethod) -> EligibilityOutcome:
        current = self._outcomes.get(vin.value)
        if current is None or not current.requirement_ok:
            raise RequirementNotChecked(f"VIN {vin} has not passed the requirement check")
        if current.vin_check is not VinCheckState.PENDING:
            return current  # already resolved; resolution is monotone
        if method is VinCheckMethod.AUTOMATIC_API:
            return self._resolve(vin, method)
        # Manual review: stays pending, resolves after the review delay.
        pending = replace(current, method=method, checked_at=self.engine.clock.now())
        self._outcomes[vin.value] = pending
        due = add_business_days(self.engine.clock.now(), self.manual_review_business_days)
        self.engine.schedule_at(due, lambda: self._resolve(vin, method), label=f"vin-review:{vin}")
        return pending

    def _resolve(self, vin: Vin, method: VinCheckMethod) -> EligibilityOutcome:
        current = self._outcomes[vin.value]
        if current.vin_check is not VinCheckState.PENDING:
            return current
        eligible = self.table.lookup(vin)
        resolved = EligibilityOutcome(
            vin=vin,
            requirement_ok=True,
            vin_check=VinCheckState.ELIGIBLE if eligible else VinCheckState.NOT_ELIGIBLE,
            checked_at=self.engine.clock.now(),
            method=method,
        )
        self._outcomes[vin.value] = resolved
        return resolved

    def run_pipeline(self, vehicle: Vehicle, method: VinCheckMethod) -> EligibilityOutcome:
        """Requirement check, then VIN check only if the first step passed."""
        if self.check_requirements(vehicle):
            return self.vin_check(vehicle.vin, method)
        return self._outcomes[vehicle.vin.value]

    def is_eligible(self, vin: Vin) -> bool:
        outcome = self._outcomes.get(vin.value)
        return outcome is not None and outcome.vin_check is VinCheckState.ELIGIBLE

    def report(self, fleet: Iterable[Vehicle], display_names: Mapping[str, str] | None = None) -> dict[str, tuple[int, int]]:
        """Per-brand (requirements_passed, vin_check_passed) counts.

        Raises PendingChecksRemain while any requirement-passing vehicle
        still has an unresolved VIN check; vehicles that failed the
        requirement step are complete by definition (their VIN is never
        checked).
        """
        counts: dict[str, tuple[int, int]] = {}
        for vehicle in fleet:
            outcome = self._outcomes.get(vehicle.vin.value)
            if outcome is None:
                raise PendingChecksRemain(f"no outcome recorded for {vehicle.vin}")
            if outcome.requirement_ok and outcome.vin_check is VinCheckState.PENDING:
                raise PendingChecksRemain(f"VIN check still pending for {vehicle.vin}")
            name = (display_names or {}).get(vehicle.brand, vehicle.brand)
            req, vin_ok = counts.get(name, (0, 0))
            counts[name] = (
                req + (1 if outcome.requirement_ok else 0),
                vin_ok + (1 if outcome.vin_check is VinCheckState.ELIGIBLE else 0),
            )
        return dict(sorted(counts.items()))
