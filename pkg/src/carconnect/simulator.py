"""Simulated OEM clouds behind a single aggregator facade.

One simulator instance stands in for every manufacturer cloud reachable
through the third-party aggregator: OAuth 2.0 token issuance, the
vehicle-data API with per-profile quotas, and webhook notification
emission with at-least-once delivery. Vehicle behavior comes from
seeded trip traces, so an entire fleet run is a pure function of
(configs, seed, clock schedule).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import hmac
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence
from zoneinfo import ZoneInfo

from .domain import (
    CarConnectError,
    DataPointKind,
    GpsPoint,
    NotificationEvent,
    NotificationKind,
    OemProfile,
    ProfileRegistry,
    QuotaMode,
    SampleSource,
    TelemetrySample,
    Vin,
    canonical_json,
    rfc3339,
)
from .consent import PrivacyMechanism
from .ratelimit import DailySlotBudget, SlidingWindowLimiter
from .timebase import DEFAULT_TZ, EventEngine
from .traces import TraceGenerator, Trip, TripModel

logger = logging.getLogger(__name__)

ACCESS_TOKEN_TTL_S = 3600.0
WEBHOOK_RETRY_DELAYS_S = (30.0, 60.0, 120.0, 240.0)  # after the initial attempt
SIGNATURE_HEADER = "x-carconnect-signature"
DELIVERY_ID_HEADER = "x-carconnect-delivery-id"
BRAND_HEADER = "x-carconnect-brand"


class InvalidGrant(CarConnectError):
    pass


class ConsentRevokedUpstream(CarConnectError):
    """The OEM refuses the exchange because consent is gone."""


class Unauthorized(CarConnectError):
    pass


class QuotaExceeded(CarConnectError):
    """Upstream 429: the per-vehicle request budget is exhausted."""


class UnsupportedKind(CarConnectError):
    pass


class UpstreamUnavailable(CarConnectError):
    """Scripted API outage window is in effect."""


class UnknownVehicle(CarConnectError):
    pass


@dataclass(frozen=True)
class FaultPlan:
    """Scripted misbehavior for one vehicle."""

    api_outages: tuple[tuple[dt.datetime, dt.datetime], ...] = ()
    transmission_test_fails: bool = False
    scripted_events: tuple[tuple[dt.datetime, NotificationKind], ...] = ()

    def api_down(self, ts: dt.datetime) -> bool:
        return any(start <= ts < end for start, end in self.api_outages)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "api_outages": [[rfc3339(a), rfc3339(b)] for a, b in self.api_outages],
            "transmission_test_fails": self.transmission_test_fails,
            "scripted_events": [[rfc3339(t), k.value] for t, k in self.scripted_events],
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "FaultPlan":
        from .domain import parse_rfc3339

        return cls(
            api_outages=tuple(
                (parse_rfc3339(a), parse_rfc3339(b)) for a, b in payload.get("api_outages", [])
            ),
            transmission_test_fails=bool(payload.get("transmission_test_fails", False)),
            scripted_events=tuple(
                (parse_rfc3339(t), NotificationKind(k)) for t, k in payload.get("scripted_events", [])
            ),
        )


@dataclass(frozen=True)
class SimVehicleConfig:
    """Everything the simulator needs to know about one car."""

    vin: Vin
    brand: str
    home: GpsPoint
    trip_model: TripModel
    privacy_mechanism: PrivacyMechanism = PrivacyMechanism.DOUBLE_PUSH
    fault_plan: FaultPlan = field(default_factory=FaultPlan)
    timezone: str = "Europe/Luxembourg"
    initial_odometer_km: float = 20_000.0
    fuel_capacity_l: float = 50.0
    consumption_l_per_100km: float = 6.0
    maintenance_interval_km: float = 30_000.0
    brake_fluid_change_date: dt.date = dt.date(2023, 6, 1)
    # Kinds this particular car actually serves; None means every kind of
    # its brand profile. Real cars routinely expose a subset.
    available_kinds: Optional[frozenset[DataPointKind]] = None

    def tz(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin.value,
            "brand": self.brand,
            "home": {"lat": self.home.lat, "lon": self.home.lon},
            "trip_model": self.trip_model.to_json_dict(),
            "privacy_mechanism": self.privacy_mechanism.value,
            "fault_plan": self.fault_plan.to_json_dict(),
            "timezone": self.timezone,
            "initial_odometer_km": self.initial_odometer_km,
            "fuel_capacity_l": self.fuel_capacity_l,
            "consumption_l_per_100km": self.consumption_l_per_100km,
            "maintenance_interval_km": self.maintenance_interval_km,
            "brake_fluid_change_date": self.brake_fluid_change_date.isoformat(),
            "available_kinds": sorted(k.value for k in self.available_kinds) if self.available_kinds else None,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "SimVehicleConfig":
        from .domain import parse_vin

        available = payload.get("available_kinds")
        return cls(
            vin=parse_vin(payload["vin"]),
            brand=payload["brand"],
            home=GpsPoint(lat=float(payload["home"]["lat"]), lon=float(payload["home"]["lon"])),
            trip_model=TripModel.from_json_dict(payload["trip_model"]),
            privacy_mechanism=PrivacyMechanism(payload.get("privacy_mechanism", "double_push")),
            fault_plan=FaultPlan.from_json_dict(payload.get("fault_plan", {})),
            timezone=payload.get("timezone", "Europe/Luxembourg"),
            initial_odometer_km=float(payload.get("initial_odometer_km", 20_000.0)),
            fuel_capacity_l=float(payload.get("fuel_capacity_l", 50.0)),
            consumption_l_per_100km=float(payload.get("consumption_l_per_100km", 6.0)),
            maintenance_interval_km=float(payload.get("maintenance_interval_km", 30_000.0)),
            brake_fluid_change_date=dt.date.fromisoformat(payload.get("brake_fluid_change_date", "2023-06-01")),
            available_kinds=frozenset(DataPointKind(k) for k in available) if available else None,
        )


@dataclass(frozen=True)
class AccessTokenGrant:
    access_token: str
    refresh_token: str
    expires_in: float
    scope: frozenset[DataPointKind]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "access_token": self.access_token,
            "refresh_token": self.refresh_token,
            "expires_in": self.expires_in,
            "token_type": "bearer",
            "scope": sorted(k.value for k in self.scope),
        }


class VehicleSimState:
    """Physical state of one simulated car, derived from its trace."""

    def __init__(self, config: SimVehicleConfig, trips: Sequence[Trip]) -> None:
        self.config = config
        self.trips = sorted(trips, key=lambda t: t.start)
        self._starts = [t.start for t in self.trips]
        # odometer reading at the START of each trip, plus fuel at trip start
        self._odo_at_start: list[float] = []
        self._fuel_at_start: list[float] = []
        odo = config.initial_odometer_km
        fuel = config.fuel_capacity_l
        for trip in self.trips:
            if fuel < 0.2 * config.fuel_capacity_l:
                fuel = config.fuel_capacity_l  # refueled while parked
            self._odo_at_start.append(odo)
            self._fuel_at_start.append(fuel)
            odo += trip.distance_km
            fuel -= trip.distance_km * config.consumption_l_per_100km / 100.0

    def _trip_index_at(self, ts: dt.datetime) -> tuple[Optional[int], Optional[int]]:
        """(active_trip_index, last_completed_index) at time ts."""
        import bisect as _bisect

        pos = _bisect.bisect_right(self._starts, ts) - 1
        if pos < 0:
            return None, None
        if self.trips[pos].covers(ts):
            return pos, pos - 1 if pos > 0 else None
        return None, pos

    def driving(self, ts: dt.datetime) -> bool:
        active, _ = self._trip_index_at(ts)
        return active is not None

    def odometer_km(self, ts: dt.datetime) -> float:
        active, last = self._trip_index_at(ts)
        if active is not None:
            return self._odo_at_start[active] + self.trips[active].distance_at(ts)
        if last is None:
            return self.config.initial_odometer_km
        return self._odo_at_start[last] + self.trips[last].distance_km

    def position(self, ts: dt.datetime) -> GpsPoint:
        active, last = self._trip_index_at(ts)
        if active is not None:
            return self.trips[active].position_at(ts)
        if last is None:
            return self.config.home
        trip = self.trips[last]
        return GpsPoint(lat=float(trip.lats[-1]), lon=float(trip.lons[-1]))

    def speed_kmh(self, ts: dt.datetime) -> float:
        active, _ = self._trip_index_at(ts)
        return self.trips[active].speed_at(ts) if active is not None else 0.0

    def heading_deg(self, ts: dt.datetime) -> float:
        active, last = self._trip_index_at(ts)
        if active is not None:
            return self.trips[active].heading_at(ts)
        if last is not None:
            return float(self.trips[last].headings_deg[-1]) % 360.0
        return 0.0

    def fuel_l(self, ts: dt.datetime) -> float:
        active, last = self._trip_index_at(ts)
        if active is not None:
            burned = self.trips[active].distance_at(ts) * self.config.consumption_l_per_100km / 100.0
            return max(0.0, self._fuel_at_start[active] - burned)
        if last is None:
            return self.config.fuel_capacity_l
        burned = self.trips[last].distance_km * self.config.consumption_l_per_100km / 100.0
        return max(0.0, self._fuel_at_start[last] - burned)

    def distance_to_next_maintenance_km(self, ts: dt.datetime) -> float:
        odo = self.odometer_km(ts)
        interval = self.config.maintenance_interval_km
        return interval - (odo % interval)

    def doors_locked(self, ts: dt.datetime) -> bool:
        return not self.driving(ts)

    def outside_temperature_c(self, ts: dt.datetime) -> float:
        local = ts.astimezone(self.config.tz())
        day_of_year = local.timetuple().tm_yday
        hour = local.hour + local.minute / 60.0
        seasonal = 10.0 - 9.0 * math.cos(2.0 * math.pi * (day_of_year - 15) / 365.0)
        diurnal = 4.0 * math.sin(2.0 * math.pi * (hour - 8.0) / 24.0)
        return round(seasonal + diurnal, 1)

    def trips_between(self, since: dt.datetime, until: dt.datetime) -> int:
        return sum(1 for trip in self.trips if trip.start >= since and trip.end <= until)

    def value_for(self, kind: DataPointKind, ts: dt.datetime):
        if kind is DataPointKind.ODOMETER:
            return round(self.odometer_km(ts), 3)
        if kind is DataPointKind.GPS_COORDINATES:
            point = self.position(ts)
            return GpsPoint(lat=round(point.lat, 7), lon=round(point.lon, 7))
        if kind is DataPointKind.HEADING:
            return round(self.heading_deg(ts), 3) % 360.0
        if kind is DataPointKind.FUEL_VOLUME:
            return round(self.fuel_l(ts), 3)
        if kind is DataPointKind.DISTANCE_TO_NEXT_MAINTENANCE:
            return round(self.distance_to_next_maintenance_km(ts), 3)
        if kind is DataPointKind.DOORS_LOCK_STATE:
            return self.doors_locked(ts)
        if kind is DataPointKind.HOOD_POSITION:
            return False  # hood open; stays closed in every shipped scenario
        if kind is DataPointKind.OUTSIDE_TEMPERATURE:
            return self.outside_temperature_c(ts)
        if kind is DataPointKind.BRAKE_FLUID_CHANGE_DATE:
            return self.config.brake_fluid_change_date
        if kind is DataPointKind.ACCELERATION_EVALUATION:
            rate = self.config.trip_model.harsh_brake_rate_per_100km
            return "dynamic" if rate > 4.0 else "moderate" if rate > 1.0 else "calm"
        if kind is DataPointKind.DRIVING_STYLE:
            night = self.config.trip_model.night_trip_fraction
            return "night_owl" if night > 0.3 else "commuter"
        raise UnsupportedKind(f"no simulated value for {kind}")


def generate_trace(config: SimVehicleConfig, start_day: dt.date, days: int, seed: int) -> list[Trip]:
    """Deterministic multi-day trip list for one vehicle config."""
    if days < 1:
        raise ValueError("days must be >= 1")
    generator = TraceGenerator(config.trip_model, config.home, config.tz())
    return generator.generate(start_day, days, seed)


@dataclass
class WebhookDelivery:
    """One notification on its way to the platform."""

    event: NotificationEvent
    brand: str
    attempts: int = 0
    delivered: bool = False
    dead: bool = False


class OemCloudSimulator:
    """All simulated OEM clouds behind one aggregator-style surface."""

    def __init__(
        self,
        registry: ProfileRegistry,
        engine: EventEngine,
        consent_active: Callable[[Vin], bool] = lambda vin: True,
        webhook_secret: Callable[[str], bytes] = lambda brand: f"oem-secret-{brand}".encode(),
    ) -> None:
        self.registry = registry
        self.engine = engine
        self.consent_active = consent_active
        self.webhook_secret = webhook_secret
        self.vehicles: dict[str, VehicleSimState] = {}
        self._seq = 0
        # OAuth book-keeping
        self._auth_codes: dict[str, str] = {}  # code -> vin (consumed entries removed)
        self._access: dict[str, tuple[str, dt.datetime, frozenset[DataPointKind]]] = {}
        self._refresh: dict[str, str] = {}  # refresh token -> vin
        self._quotas: dict[str, SlidingWindowLimiter | DailySlotBudget] = {}
        # webhook plumbing
        self.transport: Optional[Callable[[bytes, dict[str, str]], bool]] = None
        self.dead_letters: list[WebhookDelivery] = []
        self.deliveries: list[WebhookDelivery] = []
        self.upstream_429_count = 0
        # transcript of data-API calls: (ts, vin, kinds, outcome)
        self.fetch_log: list[tuple[dt.datetime, str, tuple[str, ...], str]] = []

    # -- fleet -----------------------------------------------------------------

    def add_vehicle(self, config: SimVehicleConfig, trips: Sequence[Trip]) -> VehicleSimState:
        profile = self.registry.profile_for(config.brand)
        state = VehicleSimState(config, trips)
        self.vehicles[config.vin.value] = state
        self._quotas[config.vin.value] = self._quota_for(profile, config)
        return state

    def _quota_for(self, profile: OemProfile, config: SimVehicleConfig):
        quota = profile.request_quota
        if quota.mode is QuotaMode.DAILY_SLOTS:
            return DailySlotBudget(quota.max_requests, config.tz())
        return SlidingWindowLimiter(quota.max_requests, quota.window_s)

    def state_for(self, vin: Vin) -> VehicleSimState:
        try:
            return self.vehicles[vin.value]
        except KeyError:
            raise UnknownVehicle(f"no simulated vehicle {vin}") from None

    def privacy_mechanism(self, vin: Vin) -> PrivacyMechanism:
        return self.state_for(vin).config.privacy_mechanism

    def transmission_test_ok(self, vin: Vin) -> bool:
        return not self.state_for(vin).config.fault_plan.transmission_test_fails

    def trips_since(self, vin: Vin, since: dt.datetime) -> int:
        return self.state_for(vin).trips_between(since, self.engine.clock.now())

    # -- OAuth 2.0 ---------------------------------------------------------------

    def _next_id(self, prefix: str) -> str:
        self._seq += 1
        return f"{prefix}-{self._seq:06d}"

    def issue_auth_code(self, vin: Vin) -> str:
        """Handed to the platform when the driver completes consent."""
        self.state_for(vin)
        code = self._next_id("code")
        self._auth_codes[code] = vin.value
        return code

    def token_exchange(
        self, grant_code: Optional[str] = None, refresh_token: Optional[str] = None
    ) -> AccessTokenGrant:
        if (grant_code is None) == (refresh_token is None):
            raise InvalidGrant("exactly one of grant_code/refresh_token is required")
        if grant_code is not None:
            vin_value = self._auth_codes.pop(grant_code, None)
            if vin_value is None:
                raise InvalidGrant("unknown or already consumed authorization code")
        else:
            vin_value = self._refresh.pop(refresh_token, None)
            if vin_value is None:
                raise InvalidGrant("unknown or already consumed refresh token")
        vin = Vin(vin_value)
        if not self.consent_active(vin):
            raise ConsentRevokedUpstream(f"consent for {vin} is not active")
        profile = self.registry.profile_for(self.state_for(vin).config.brand)
        access = self._next_id("at")
        refresh = self._next_id("rt")
        expires_at = self.engine.clock.now() + dt.timedelta(seconds=ACCESS_TOKEN_TTL_S)
        self._access[access] = (vin_value, expires_at, profile.request_kinds)
        self._refresh[refresh] = vin_value
        return AccessTokenGrant(
            access_token=access,
            refresh_token=refresh,
            expires_in=ACCESS_TOKEN_TTL_S,
            scope=profile.request_kinds,
        )

    def revoke_tokens(self, vin: Vin) -> None:
        vin_value = vin.value
        self._access = {k: v for k, v in self._access.items() if v[0] != vin_value}
        self._refresh = {k: v for k, v in self._refresh.items() if v != vin_value}
        self._auth_codes = {k: v for k, v in self._auth_codes.items() if v != vin_value}

    # -- data API -----------------------------------------------------------------

    def fetch_data(self, vin: Vin, kinds: Iterable[DataPointKind], access_token: str) -> list[TelemetrySample]:
        """Current values for the requested kinds; consumes one quota unit.

        Kinds the brand never serves raise UnsupportedKind; kinds the brand
        serves but this particular car does not are simply absent from the
        response, mirroring how real fleets differ per model year.
        """
        now = self.engine.clock.now()
        kinds = list(kinds)
        kind_names = tuple(sorted(k.value for k in kinds))

        def log(outcome: str) -> None:
            self.fetch_log.append((now, vin.value, kind_names, outcome))

        state = self.state_for(vin)
        if state.config.fault_plan.api_down(now):
            log("unavailable")
            raise UpstreamUnavailable(f"scripted API outage for {vin}")
        entry = self._access.get(access_token)
        if entry is None or entry[0] != vin.value:
            log("unauthorized")
            raise Unauthorized("access token unknown for this vehicle")
        _, expires_at, scope = entry
        if now >= expires_at:
            log("token_expired")
            raise Unauthorized("access token expired")
        if not self.consent_active(vin):
            log("consent_inactive")
            raise Unauthorized("consent is not active")
        profile = self.registry.profile_for(state.config.brand)
        for kind in kinds:
            if kind not in profile.request_kinds:
                log("unsupported_kind")
                raise UnsupportedKind(f"{state.config.brand} does not serve {kind.value}")
            if kind not in scope:
                log("out_of_scope")
                raise Unauthorized(f"token scope does not cover {kind.value}")
        quota = self._quotas[vin.value]
        if not quota.try_acquire(now):
            self.upstream_429_count += 1
            log("quota_exceeded")
            raise QuotaExceeded(f"request quota exhausted for {vin}")
        served = state.config.available_kinds or profile.request_kinds
        samples = []
        for kind in kinds:
            if kind not in served:
                continue
            samples.append(
                TelemetrySample(
                    vin=vin,
                    kind=kind,
                    value=state.value_for(kind, now),
                    observed_at=now,
                    source=SampleSource.REQUEST,
                )
            )
        log("ok")
        return samples

    # -- notifications ---------------------------------------------------------------

    def schedule_vehicle_events(self, vin: Vin) -> int:
        """Queue every notification this vehicle will emit over its trace.

        Only kinds the brand actually pushes are scheduled; an
        odometer-only brand drives the same trips but stays silent.
        """
        state = self.state_for(vin)
        profile = self.registry.profile_for(state.config.brand)
        interval = state.config.trip_model.gps_emit_interval_s
        now = self.engine.clock.now()
        scheduled = 0
        if NotificationKind.LOCATION_CHANGE in profile.notification_kinds:
            for trip in state.trips:
                emissions = int(trip.duration_s // interval)
                for k in range(1, emissions + 1):
                    when = trip.start + dt.timedelta(seconds=interval * k)
                    if when < now:
                        continue  # trace attached mid-run: the past stays silent
                    self.engine.schedule_at(
                        when,
                        lambda v=vin: self._emit(v, NotificationKind.LOCATION_CHANGE),
                        label=f"gps:{vin}",
                    )
                    scheduled += 1
        for when, kind in state.config.fault_plan.scripted_events:
            if when < now:
                continue
            self.engine.schedule_at(when, lambda v=vin, k=kind: self._emit(v, k), label=f"event:{vin}")
            scheduled += 1
        return scheduled

    def emit_now(self, vin: Vin, kind: NotificationKind) -> Optional[NotificationEvent]:
        """Fire one notification immediately (used by scenario scripting)."""
        return self._emit(vin, kind)

    def _emit(self, vin: Vin, kind: NotificationKind) -> Optional[NotificationEvent]:
        state = self.state_for(vin)
        profile = self.registry.profile_for(state.config.brand)
        if kind not in profile.notification_kinds:
            raise UnsupportedKind(f"{state.config.brand} does not push {kind.value}")
        # After consent is revoked the OEM stops pushing everything except
        # the revoke notice itself.
        if kind is not NotificationKind.REVOKE_OF_CONSENT and not self.consent_active(vin):
            return None
        event = NotificationEvent(
            vin=vin,
            kind=kind,
            emitted_at=self.engine.clock.now(),
            delivery_id=self._next_id("dlv"),
        )
        delivery = WebhookDelivery(event=event, brand=state.config.brand)
        self.deliveries.append(delivery)
        self._attempt_delivery(delivery)
        return event

    def _attempt_delivery(self, delivery: WebhookDelivery) -> None:
        if self.transport is None:
            raise RuntimeError("no webhook transport attached")
        delivery.attempts += 1
        body = canonical_json(delivery.event.to_json_dict()).encode()
        secret = self.webhook_secret(delivery.brand)
        headers = {
            DELIVERY_ID_HEADER: delivery.event.delivery_id,
            BRAND_HEADER: delivery.brand,
            SIGNATURE_HEADER: hmac.new(secret, body, hashlib.sha256).hexdigest(),
        }
        ok = False
        try:
            ok = self.transport(body, headers)
        except Exception:  # unreachable platform counts as a failed attempt
            ok = False
        if ok:
            delivery.delivered = True
            return
        retry_index = delivery.attempts - 1
        if retry_index >= len(WEBHOOK_RETRY_DELAYS_S):
            delivery.dead = True
            self.dead_letters.append(delivery)
            logger.warning("webhook %s dead-lettered after %d attempts", delivery.event.delivery_id, delivery.attempts)
            return
        self.engine.schedule_in(
            WEBHOOK_RETRY_DELAYS_S[retry_index],
            lambda: self._attempt_delivery(delivery),
            label=f"retry:{delivery.event.delivery_id}",
        )
