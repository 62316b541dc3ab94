"""End-to-end wiring: one simulated world, fully deterministic.

A Scenario owns the event engine, the simulated OEM clouds, the platform
(consent, ingestion, storage, eligibility) and the glue between them. All
randomness is derived from one seed and all time from one simulated
clock, so a run is a pure function of (configs, seed, script) and exports
are byte-identical across replays.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .consent import ConsentService, ConsentState, PrivacyMechanism
from .domain import (
    ConsentVariant,
    ProfileRegistry,
    UTC,
    Vehicle,
    Vin,
    parse_rfc3339,
)
from .eligibility import EligibilityService, RequirementRule, VinCheckState, VinEligibilityTable
from .ingestion import CollectionPolicy, IngestionPlatform, TokenManager
from .simulator import FaultPlan, OemCloudSimulator, SimVehicleConfig, generate_trace
from .storage import FileSeriesStore, FileStaticStore, SeriesStore, StaticStore
from .timebase import EventEngine, SimClock
from .traces import Trip

DEFAULT_START = dt.datetime(2022, 1, 17, 0, 0, tzinfo=UTC)  # a Monday


def derive_seed(master_seed: int, key: str) -> int:
    """Stable 32-bit stream seed for a named sub-component."""
    digest = hashlib.sha256(f"{master_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def materialize_fault_plan(raw: Mapping[str, Any], start: dt.datetime) -> FaultPlan:
    """Resolve day-offset fault windows against the scenario start."""
    outages = tuple(
        (start + dt.timedelta(days=float(a)), start + dt.timedelta(days=float(b)))
        for a, b in raw.get("api_outages_days", [])
    )
    events = tuple(
        (start + dt.timedelta(days=float(offset)), kind)
        for offset, kind in raw.get("scripted_events_days", [])
    )
    from .domain import NotificationKind

    return FaultPlan(
        api_outages=outages,
        transmission_test_fails=bool(raw.get("transmission_test_fails", False)),
        scripted_events=tuple((ts, NotificationKind(kind)) for ts, kind in events),
    )


def sim_config_from_entry(entry: Mapping[str, Any], start: dt.datetime) -> SimVehicleConfig:
    payload = dict(entry)
    payload.pop("label", None)
    raw_fault = payload.pop("fault_plan", {}) or {}
    config = SimVehicleConfig.from_json_dict({**payload, "fault_plan": {}})
    from dataclasses import replace

    return replace(config, fault_plan=materialize_fault_plan(raw_fault, start))


class Scenario:
    """A complete simulated deployment around one clock."""

    def __init__(
        self,
        start: dt.datetime = DEFAULT_START,
        seed: int = 42,
        registry: Optional[ProfileRegistry] = None,
        rules: Optional[Sequence[RequirementRule]] = None,
        vin_table: Optional[VinEligibilityTable] = None,
        data_dir: Optional[Path | str] = None,
        policies: Optional[Mapping[str, CollectionPolicy]] = None,
    ) -> None:
        if registry is None:
            from .fixtures import reference_registry

            registry = reference_registry()
        self.start = start.astimezone(UTC)
        self.seed = seed
        self.registry = registry
        self.clock = SimClock(self.start)
        self.engine = EventEngine(self.clock)
        if data_dir is not None:
            root = Path(data_dir)
            self.series: SeriesStore = FileSeriesStore(root / "series")
            self.statics: StaticStore = FileStaticStore(root / "static.jsonl", registry)
        else:
            self.series = SeriesStore()
            self.statics = StaticStore(registry)
        self.eligibility: Optional[EligibilityService] = None
        if rules is not None and vin_table is not None:
            self.eligibility = EligibilityService(rules, vin_table, self.engine)
        self._outages: list[tuple[dt.datetime, dt.datetime]] = []

        self.sim = OemCloudSimulator(
            registry,
            self.engine,
            consent_active=lambda vin: self.consents.allows_collection(vin),
        )
        self.consents = ConsentService(
            self.engine,
            eligibility_gate=self._eligibility_gate,
            mechanism_lookup=lambda vin: self.sim.privacy_mechanism(vin),
            transmission_ok=lambda vin: self.sim.transmission_test_ok(vin),
            trips_since=lambda vin, since: self.sim.trips_since(vin, since),
            credential_issuer=lambda vin: self.tokens.provision(vin),
            on_activated=lambda vin: self.platform.on_consent_activated(vin),
            on_revoked=lambda vin: self.platform.on_consent_revoked(vin),
        )
        self.tokens = TokenManager(self.sim, self.engine)
        self.platform = IngestionPlatform(
            engine=self.engine,
            registry=registry,
            consents=self.consents,
            oem=self.sim,
            series=self.series,
            statics=self.statics,
            policies=policies,
            platform_down=self.platform_down,
            tokens=self.tokens,
        )
        self.sim.transport = self._deliver_webhook
        self.consents.schedule_sweeper()

    # -- faults ------------------------------------------------------------------

    def add_platform_outage(self, start_offset_s: float, end_offset_s: float) -> None:
        self._outages.append(
            (
                self.start + dt.timedelta(seconds=start_offset_s),
                self.start + dt.timedelta(seconds=end_offset_s),
            )
        )

    def platform_down(self, ts: dt.datetime) -> bool:
        return any(a <= ts < b for a, b in self._outages)

    def _deliver_webhook(self, body: bytes, headers: dict[str, str]) -> bool:
        if self.platform_down(self.clock.now()):
            return False
        self.platform.receive_webhook(body, headers)
        return True

    def _eligibility_gate(self, vin: Vin) -> bool:
        if self.eligibility is None:
            return True
        return self.eligibility.is_eligible(vin)

    # -- fleet setup ------------------------------------------------------------------

    def register_vehicle(self, vehicle: Vehicle, driver_email: Optional[str] = None) -> None:
        self.statics.put_vehicle(vehicle)
        if driver_email:
            self.statics.put_driver(driver_email, {"email": driver_email, "vin": vehicle.vin.value})

    def add_sim_vehicle(self, config: SimVehicleConfig, days: int, trace: Optional[Sequence[Trip]] = None) -> list[Trip]:
        """Create the simulated car, generate (or accept) its trace and queue
        every notification it will emit."""
        if trace is None:
            local_day = self.start.astimezone(config.tz()).date()
            trace = generate_trace(config, local_day, days, derive_seed(self.seed, config.vin.value))
        self.sim.add_vehicle(config, trace)
        self.sim.schedule_vehicle_events(config.vin)
        return list(trace)

    # -- eligibility / enrollment ------------------------------------------------------

    def ensure_eligible(self, vehicle: Vehicle, max_wait_days: int = 7) -> bool:
        """Run the screening pipeline, advancing past any manual review."""
        if self.eligibility is None:
            return True
        profile = self.registry.profile_for(vehicle.brand)
        outcome = self.eligibility.run_pipeline(vehicle, profile.vin_check_method)
        waited = 0
        while outcome.requirement_ok and outcome.vin_check is VinCheckState.PENDING and waited < max_wait_days:
            self.engine.run_until(self.clock.now() + dt.timedelta(days=1))
            waited += 1
            outcome = self.eligibility.outcome(vehicle.vin) or outcome
        self.statics.put_outcome(outcome.to_json_dict())
        return outcome.vin_check is VinCheckState.ELIGIBLE

    def enroll_simple(self, vin: Vin, driver_email: str) -> None:
        """Headless happy-path run of the two-step portal consent."""
        record = self.consents.initiate(vin, driver_email, ConsentVariant.SIMPLE_PORTAL)
        self.consents.accept_review(vin, record.link_token, approved=True)
        self.consents.confirm_on_oem_portal(vin, approved=True)
        self._persist_consent(vin)

    def enroll_stellantis(self, vin: Vin, driver_email: str, background_days: int = 3, max_wait_days: int = 21) -> None:
        """Headless happy-path run of the long consent flow.

        Advances simulated time for the background process until the car
        has been driven, then files the first odometer report.
        """
        record = self.consents.initiate(vin, driver_email, ConsentVariant.STELLANTIS_COMPLEX)
        self.consents.accept_review(vin, record.link_token, approved=True)
        self.consents.verify_identity(vin, passed=True)
        mechanism = self.consents.lookup_mechanism(vin)
        self.consents.configure_privacy_settings(vin, mechanism)
        record = self.consents.run_transmission_test(vin)
        if record.state is not ConsentState.BACKGROUND_PROCESSING:
            raise RuntimeError(f"transmission test failed for {vin}: {record.advisory}")
        test_done_at = record.state_changed_at
        self.engine.run_until(self.clock.now() + dt.timedelta(days=background_days))
        waited = background_days
        while self.sim.trips_since(vin, test_done_at) < 1 and waited < max_wait_days:
            self.engine.run_until(self.clock.now() + dt.timedelta(days=1))
            waited += 1
        self.consents.complete_background_processing(vin)
        odometer = self.sim.state_for(vin).odometer_km(self.clock.now())
        self.consents.report_odometer(vin, round(odometer, 1))
        self._persist_consent(vin)

    def _persist_consent(self, vin: Vin) -> None:
        record = self.consents.record(vin)
        if record is not None:
            self.statics.put_consent(record.to_json_dict())

    def persist_all_consents(self) -> None:
        for record in self.consents.records():
            self.statics.put_consent(record.to_json_dict())

    # -- running ---------------------------------------------------------------------

    def at(self, offset_s: float, action: Callable[[], None], label: str = "scripted") -> None:
        self.engine.schedule_at(self.start + dt.timedelta(seconds=offset_s), action, label=label)

    def run_days(self, days: float) -> None:
        self.engine.run_until(self.clock.now() + dt.timedelta(days=days))
        self.persist_all_consents()

    def run_until_offset(self, offset_days: float) -> None:
        self.engine.run_until(self.start + dt.timedelta(days=offset_days))
        self.persist_all_consents()

    # -- export ---------------------------------------------------------------------

    def export_all(self, out_dir: Path | str) -> list[Path]:
        """Dump every store as JSON-lines; file set and bytes are stable."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        static_path = out / "static.jsonl"
        static_path.write_text("\n".join(self.statics.export_lines()) + "\n", encoding="utf-8")
        written.append(static_path)
        series_dir = out / "series"
        series_dir.mkdir(exist_ok=True)
        for vin in self.series.vins():
            path = series_dir / f"{vin}.jsonl"
            path.write_text("\n".join(self.series.export_vin_lines(vin)) + "\n", encoding="utf-8")
            written.append(path)
        return written

    def import_series(self, dump_dir: Path | str) -> int:
        count = 0
        for path in sorted(Path(dump_dir).glob("series/*.jsonl")):
            written, events = self.series.import_lines(path.read_text(encoding="utf-8").splitlines())
            count += written + events
        return count


def build_reference_scenario(
    seed: int = 42,
    start: dt.datetime = DEFAULT_START,
    data_dir: Optional[Path | str] = None,
    labels: Optional[Sequence[str]] = None,
    horizon_days: int = 70,
    with_eligibility: bool = True,
    cadence: str = "default",
) -> Scenario:
    """Scenario pre-loaded with the shipped fixtures.

    Registers the reference fleet, simulates the cars named by `labels`
    (default: all shipped sim vehicles) and enrolls them after screening.
    `cadence="dense"` requests on every location change, which trades data
    cost for the fix density trip analytics needs.
    """
    from .fixtures import (
        reference_fleet,
        reference_registry,
        reference_rules,
        reference_vin_table,
        sim_fleet_entries,
    )
    from .ingestion import dense_policies

    registry = reference_registry()
    scenario = Scenario(
        start=start,
        seed=seed,
        registry=registry,
        rules=reference_rules() if with_eligibility else None,
        vin_table=reference_vin_table() if with_eligibility else None,
        data_dir=data_dir,
        policies=dense_policies(registry) if cadence == "dense" else None,
    )
    emails: dict[str, str] = {}
    for entry in reference_fleet("paper19+offyear"):
        scenario.register_vehicle(entry.vehicle, entry.driver_email)
        emails[entry.vehicle.vin.value] = entry.driver_email
    chosen = sim_fleet_entries()
    if labels is not None:
        chosen = [e for e in chosen if e["label"] in set(labels)]
    # All traces are scheduled against the same start before enrollment
    # advances the clock; pre-consent emissions stay silent anyway.
    configs = []
    for entry in chosen:
        config = sim_config_from_entry(entry, scenario.start)
        scenario.add_sim_vehicle(config, horizon_days)
        configs.append(config)
    for config in configs:
        vehicle = scenario.statics.get_vehicle(config.vin)
        if vehicle is None:
            raise RuntimeError(f"sim vehicle {config.vin} missing from the static fleet")
        if with_eligibility and not scenario.ensure_eligible(vehicle):
            continue
        profile = scenario.registry.profile_for(vehicle.brand)
        email = emails.get(config.vin.value, "driver@example.lu")
        if profile.consent_variant is ConsentVariant.STELLANTIS_COMPLEX:
            scenario.enroll_stellantis(config.vin, email)
        else:
            scenario.enroll_simple(config.vin, email)
    return scenario
