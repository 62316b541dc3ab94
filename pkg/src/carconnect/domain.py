"""Core domain types shared by every part of the platform.

Everything here is an immutable value: vehicle identity, per-brand
capability profiles, telemetry samples and webhook events. All types have
a canonical JSON form (snake_case fields, RFC 3339 UTC timestamps) so
they can cross process boundaries and be replayed deterministically.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

# Standard VIN alphabet: uppercase alphanumerics minus I, O, Q.
VIN_LENGTH = 17
VIN_ALPHABET = frozenset("ABCDEFGHJKLMNPRSTUVWXYZ0123456789")


class CarConnectError(Exception):
    """Base class for every domain-level error raised by this package."""


class VinError(CarConnectError):
    pass


class BadLength(VinError):
    """VIN is not exactly 17 characters."""


class ForbiddenCharacter(VinError):
    """VIN contains a character outside the VIN alphabet (e.g. I, O, Q)."""


class UnknownBrand(CarConnectError):
    """Brand id has no registered capability profile."""


# ---------------------------------------------------------------------------
# Timestamps
# ---------------------------------------------------------------------------

UTC = dt.timezone.utc


def rfc3339(ts: dt.datetime) -> str:
    """Render an aware datetime as RFC 3339 UTC with millisecond precision."""
    if ts.tzinfo is None:
        raise ValueError("naive datetime; timestamps must be timezone-aware")
    ts = ts.astimezone(UTC)
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def parse_rfc3339(raw: str) -> dt.datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    text = raw.replace("Z", "+00:00") if raw.endswith("Z") else raw
    parsed = dt.datetime.fromisoformat(text)
    if parsed.tzinfo is None:
        raise ValueError(f"timestamp without offset: {raw!r}")
    parsed = parsed.astimezone(UTC)
    # Millisecond precision is the storage contract; drop sub-ms noise.
    return parsed.replace(microsecond=(parsed.microsecond // 1000) * 1000)


def canonical_json(payload: Any) -> str:
    """Stable JSON encoding: sorted keys, no whitespace, UTF-8 passthrough."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# VIN
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Vin:
    """Validated 17-character vehicle identification string."""

    value: str

    def __post_init__(self) -> None:
        if len(self.value) != VIN_LENGTH:
            raise BadLength(f"VIN must be {VIN_LENGTH} characters, got {len(self.value)}")
        bad = [c for c in self.value if c not in VIN_ALPHABET]
        if bad:
            raise ForbiddenCharacter(f"VIN contains forbidden character(s): {bad!r}")

    def __str__(self) -> str:
        return self.value


def parse_vin(raw: str) -> Vin:
    """Validate and normalize a raw VIN string.

    Uppercases the input, then enforces the public 17-character VIN
    alphabet (I, O and Q are never used). Raises BadLength or
    ForbiddenCharacter so clearly bad input is rejected before any
    upstream call is attempted.
    """
    return Vin(raw.strip().upper())


# ---------------------------------------------------------------------------
# Data-point and notification catalogs
# ---------------------------------------------------------------------------


class DataPointKind(str, Enum):
    ODOMETER = "odometer"
    GPS_COORDINATES = "gps_coordinates"
    HEADING = "heading"
    FUEL_VOLUME = "fuel_volume"
    DISTANCE_TO_NEXT_MAINTENANCE = "distance_to_next_maintenance"
    DOORS_LOCK_STATE = "doors_lock_state"
    HOOD_POSITION = "hood_position"
    OUTSIDE_TEMPERATURE = "outside_temperature"
    BRAKE_FLUID_CHANGE_DATE = "brake_fluid_change_date"
    ACCELERATION_EVALUATION = "acceleration_evaluation"
    DRIVING_STYLE = "driving_style"


class NotificationKind(str, Enum):
    ACCIDENT_REPORTED = "accident_reported"
    BATTERY_WARNING = "battery_warning"
    BREAKDOWN_REPORTED = "breakdown_reported"
    EMERGENCY_REPORTED = "emergency_reported"
    ENGINE_CHANGED = "engine_changed"
    MAINTENANCE_CHANGED = "maintenance_changed"
    REVOKE_OF_CONSENT = "revoke_of_consent"
    LOCATION_CHANGE = "location_change"


#: The only notification kind that triggers a data request by default.
REQUEST_TRIGGER_KIND = NotificationKind.LOCATION_CHANGE


@dataclass(frozen=True)
class GpsPoint:
    """WGS84 coordinate pair in decimal degrees."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


# Value schema per data-point kind. Samples are typed, never stringly
# encoded, so analytics cannot silently mix km with liters or degrees.
_NUMERIC_KINDS = {
    DataPointKind.ODOMETER,
    DataPointKind.FUEL_VOLUME,
    DataPointKind.DISTANCE_TO_NEXT_MAINTENANCE,
    DataPointKind.OUTSIDE_TEMPERATURE,
}
_BOOL_KINDS = {DataPointKind.DOORS_LOCK_STATE, DataPointKind.HOOD_POSITION}
_OPAQUE_KINDS = {DataPointKind.ACCELERATION_EVALUATION, DataPointKind.DRIVING_STYLE}

SampleValue = Any  # float | bool | str | dt.date | GpsPoint, depending on kind


def validate_sample_value(kind: DataPointKind, value: SampleValue) -> SampleValue:
    """Check that a value fits the schema of its data-point kind."""
    if kind in _NUMERIC_KINDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{kind.value} expects a number, got {type(value).__name__}")
        value = float(value)
        if kind is DataPointKind.ODOMETER and value < 0:
            raise ValueError("odometer must be non-negative")
        if kind is DataPointKind.FUEL_VOLUME and value < 0:
            raise ValueError("fuel volume must be non-negative")
        return value
    if kind is DataPointKind.HEADING:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("heading expects a number")
        value = float(value)
        if not 0.0 <= value < 360.0:
            raise ValueError(f"heading out of range [0, 360): {value}")
        return value
    if kind is DataPointKind.GPS_COORDINATES:
        if not isinstance(value, GpsPoint):
            raise ValueError("gps_coordinates expects a GpsPoint")
        return value
    if kind in _BOOL_KINDS:
        if not isinstance(value, bool):
            raise ValueError(f"{kind.value} expects a boolean")
        return value
    if kind is DataPointKind.BRAKE_FLUID_CHANGE_DATE:
        if not isinstance(value, dt.date) or isinstance(value, dt.datetime):
            raise ValueError("brake_fluid_change_date expects a date")
        return value
    if kind in _OPAQUE_KINDS:
        # Available upstream but not interpreted: carried as opaque text.
        if not isinstance(value, str):
            raise ValueError(f"{kind.value} expects an opaque string payload")
        return value
    raise ValueError(f"unhandled kind {kind!r}")


def sample_value_to_json(kind: DataPointKind, value: SampleValue) -> Any:
    if kind is DataPointKind.GPS_COORDINATES:
        return {"lat": value.lat, "lon": value.lon}
    if kind is DataPointKind.BRAKE_FLUID_CHANGE_DATE:
        return value.isoformat()
    return value


def sample_value_from_json(kind: DataPointKind, payload: Any) -> SampleValue:
    if kind is DataPointKind.GPS_COORDINATES:
        return GpsPoint(lat=float(payload["lat"]), lon=float(payload["lon"]))
    if kind is DataPointKind.BRAKE_FLUID_CHANGE_DATE:
        return dt.date.fromisoformat(payload)
    return validate_sample_value(kind, payload)


# ---------------------------------------------------------------------------
# OEM capability profiles
# ---------------------------------------------------------------------------


class QuotaMode(str, Enum):
    SLIDING = "sliding"          # rolling window, e.g. 50 requests per minute
    DAILY_SLOTS = "daily_slots"  # fixed per-day budget, reset at local midnight


@dataclass(frozen=True)
class RequestQuota:
    """Upstream request budget: at most `max_requests` per `window_s`."""

    max_requests: int
    window_s: float
    mode: QuotaMode = QuotaMode.SLIDING

    def __post_init__(self) -> None:
        if self.window_s <= 0:
            raise ValueError("quota window must be positive")
        if self.max_requests < 1:
            raise ValueError("quota max must be at least 1")


class ConsentVariant(str, Enum):
    SIMPLE_PORTAL = "simple_portal"
    STELLANTIS_COMPLEX = "stellantis_complex"


class VinCheckMethod(str, Enum):
    AUTOMATIC_API = "automatic_api"
    MANUAL_REVIEW = "manual_review"


@dataclass(frozen=True)
class OemProfile:
    """Per-brand capability descriptor.

    Which events the brand pushes, which data points it serves on request,
    how hard it rate-limits, which consent flow its drivers go through and
    what the monthly data subscription costs.
    """

    brand: str
    display_name: str
    notification_kinds: frozenset[NotificationKind]
    request_kinds: frozenset[DataPointKind]
    request_quota: RequestQuota
    consent_variant: ConsentVariant
    monthly_data_cost_eur: float
    vin_check_method: VinCheckMethod = VinCheckMethod.AUTOMATIC_API

    def __post_init__(self) -> None:
        if NotificationKind.REVOKE_OF_CONSENT not in self.notification_kinds:
            raise ValueError(f"profile {self.brand}: revoke_of_consent notification is mandatory")
        if self.monthly_data_cost_eur < 0:
            raise ValueError("monthly data cost cannot be negative")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "brand": self.brand,
            "display_name": self.display_name,
            "notification_kinds": sorted(k.value for k in self.notification_kinds),
            "request_kinds": sorted(k.value for k in self.request_kinds),
            "request_quota": {
                "max_requests": self.request_quota.max_requests,
                "window_s": self.request_quota.window_s,
                "mode": self.request_quota.mode.value,
            },
            "consent_variant": self.consent_variant.value,
            "monthly_data_cost_eur": self.monthly_data_cost_eur,
            "vin_check_method": self.vin_check_method.value,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "OemProfile":
        quota = payload["request_quota"]
        return cls(
            brand=payload["brand"],
            display_name=payload.get("display_name", payload["brand"]),
            notification_kinds=frozenset(NotificationKind(k) for k in payload["notification_kinds"]),
            request_kinds=frozenset(DataPointKind(k) for k in payload["request_kinds"]),
            request_quota=RequestQuota(
                max_requests=int(quota["max_requests"]),
                window_s=float(quota["window_s"]),
                mode=QuotaMode(quota.get("mode", "sliding")),
            ),
            consent_variant=ConsentVariant(payload["consent_variant"]),
            monthly_data_cost_eur=float(payload["monthly_data_cost_eur"]),
            vin_check_method=VinCheckMethod(payload.get("vin_check_method", "automatic_api")),
        )


# The full notification catalog is exactly what a BMW-like brand pushes.
BMW_LIKE_NOTIFICATIONS = frozenset(NotificationKind)
# A BMW-like brand serves every cataloged data point on request.
BMW_LIKE_REQUEST_KINDS = frozenset(DataPointKind)

MERCEDES_LIKE_NOTIFICATIONS = frozenset({NotificationKind.REVOKE_OF_CONSENT})
MERCEDES_LIKE_REQUEST_KINDS = frozenset({DataPointKind.ODOMETER})


def bmw_like_profile(brand: str = "bmw-like", display_name: str | None = None) -> OemProfile:
    """Archetype: rich data points, notification-driven, 50 requests/minute."""
    return OemProfile(
        brand=brand,
        display_name=display_name or brand,
        notification_kinds=BMW_LIKE_NOTIFICATIONS,
        request_kinds=BMW_LIKE_REQUEST_KINDS,
        request_quota=RequestQuota(max_requests=50, window_s=60.0, mode=QuotaMode.SLIDING),
        consent_variant=ConsentVariant.SIMPLE_PORTAL,
        monthly_data_cost_eur=6.5,
        vin_check_method=VinCheckMethod.AUTOMATIC_API,
    )


def mercedes_like_profile(brand: str = "mercedes-like", display_name: str | None = None) -> OemProfile:
    """Archetype: odometer only, at most two requests per day, cheaper rate."""
    return OemProfile(
        brand=brand,
        display_name=display_name or brand,
        notification_kinds=MERCEDES_LIKE_NOTIFICATIONS,
        request_kinds=MERCEDES_LIKE_REQUEST_KINDS,
        request_quota=RequestQuota(max_requests=2, window_s=86400.0, mode=QuotaMode.DAILY_SLOTS),
        consent_variant=ConsentVariant.SIMPLE_PORTAL,
        monthly_data_cost_eur=2.1,
        vin_check_method=VinCheckMethod.MANUAL_REVIEW,
    )


def stellantis_like_profile(brand: str = "stellantis-like", display_name: str | None = None) -> OemProfile:
    """Archetype: BMW-like capabilities behind the long multi-step consent flow."""
    return OemProfile(
        brand=brand,
        display_name=display_name or brand,
        notification_kinds=BMW_LIKE_NOTIFICATIONS,
        request_kinds=BMW_LIKE_REQUEST_KINDS,
        request_quota=RequestQuota(max_requests=50, window_s=60.0, mode=QuotaMode.SLIDING),
        consent_variant=ConsentVariant.STELLANTIS_COMPLEX,
        monthly_data_cost_eur=6.5,
        vin_check_method=VinCheckMethod.AUTOMATIC_API,
    )


_ARCHETYPES = {
    "bmw-like": bmw_like_profile,
    "mercedes-like": mercedes_like_profile,
    "stellantis-like": stellantis_like_profile,
}


class ProfileRegistry:
    """Open registry of brand id -> OemProfile, read-only after startup."""

    def __init__(self, profiles: Iterable[OemProfile] = ()) -> None:
        self._profiles: dict[str, OemProfile] = {}
        for profile in profiles:
            self.register(profile)

    def register(self, profile: OemProfile) -> None:
        if profile.brand in self._profiles:
            raise ValueError(f"brand {profile.brand!r} already registered")
        self._profiles[profile.brand] = profile

    def profile_for(self, brand: str) -> OemProfile:
        try:
            return self._profiles[brand]
        except KeyError:
            raise UnknownBrand(f"no profile registered for brand {brand!r}") from None

    def brands(self) -> list[str]:
        return sorted(self._profiles)

    def __contains__(self, brand: str) -> bool:
        return brand in self._profiles

    def __iter__(self):
        return iter(sorted(self._profiles.values(), key=lambda p: p.brand))

    @classmethod
    def with_builtins(cls) -> "ProfileRegistry":
        return cls(factory() for factory in _ARCHETYPES.values())

    @classmethod
    def from_config(cls, entries: Iterable[Mapping[str, Any]], include_builtins: bool = True) -> "ProfileRegistry":
        """Build a registry from declarative config entries.

        Each entry is either a full profile dict (see OemProfile.from_json_dict)
        or a shorthand `{"brand": ..., "archetype": ..., "display_name": ...}`
        that clones one of the built-in archetypes under a new brand id.
        """
        registry = cls.with_builtins() if include_builtins else cls()
        for entry in entries:
            if "archetype" in entry:
                factory = _ARCHETYPES.get(entry["archetype"])
                if factory is None:
                    raise UnknownBrand(f"unknown archetype {entry['archetype']!r}")
                profile = factory(brand=entry["brand"], display_name=entry.get("display_name"))
                overrides = {k: v for k, v in entry.items() if k in ("monthly_data_cost_eur", "vin_check_method")}
                if overrides:
                    payload = profile.to_json_dict()
                    payload.update(overrides)
                    profile = OemProfile.from_json_dict(payload)
            else:
                profile = OemProfile.from_json_dict(entry)
            registry.register(profile)
        return registry


# ---------------------------------------------------------------------------
# Vehicles, samples, events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vehicle:
    """Static description of one car, as captured at enrollment time."""

    vin: Vin
    brand: str
    model: str
    production_year: int
    purchase_country: str
    fidelity_program_member: bool = False

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin.value,
            "brand": self.brand,
            "model": self.model,
            "production_year": self.production_year,
            "purchase_country": self.purchase_country,
            "fidelity_program_member": self.fidelity_program_member,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "Vehicle":
        return cls(
            vin=parse_vin(payload["vin"]),
            brand=payload["brand"],
            model=payload["model"],
            production_year=int(payload["production_year"]),
            purchase_country=payload["purchase_country"],
            fidelity_program_member=bool(payload.get("fidelity_program_member", False)),
        )


class SampleSource(str, Enum):
    REQUEST = "request"
    NOTIFICATION = "notification"


@dataclass(frozen=True)
class TelemetrySample:
    """One timestamped data-point observation (the dynamic-store row)."""

    vin: Vin
    kind: DataPointKind
    value: SampleValue
    observed_at: dt.datetime
    source: SampleSource = SampleSource.REQUEST

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", validate_sample_value(self.kind, self.value))
        if self.observed_at.tzinfo is None:
            raise ValueError("observed_at must be timezone-aware")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin.value,
            "kind": self.kind.value,
            "value": sample_value_to_json(self.kind, self.value),
            "observed_at": rfc3339(self.observed_at),
            "source": self.source.value,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "TelemetrySample":
        kind = DataPointKind(payload["kind"])
        return cls(
            vin=parse_vin(payload["vin"]),
            kind=kind,
            value=sample_value_from_json(kind, payload["value"]),
            observed_at=parse_rfc3339(payload["observed_at"]),
            source=SampleSource(payload.get("source", "request")),
        )


@dataclass(frozen=True)
class NotificationEvent:
    """Webhook payload: an event kind observed for a VIN at some time.

    delivery_id is unique per delivery attempt stream; duplicates of the
    same delivery_id must be idempotently ignored downstream.
    """

    vin: Vin
    kind: NotificationKind
    emitted_at: dt.datetime
    delivery_id: str

    def __post_init__(self) -> None:
        if self.emitted_at.tzinfo is None:
            raise ValueError("emitted_at must be timezone-aware")
        if not self.delivery_id:
            raise ValueError("delivery_id must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin.value,
            "kind": self.kind.value,
            "emitted_at": rfc3339(self.emitted_at),
            "delivery_id": self.delivery_id,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "NotificationEvent":
        return cls(
            vin=parse_vin(payload["vin"]),
            kind=NotificationKind(payload["kind"]),
            emitted_at=parse_rfc3339(payload["emitted_at"]),
            delivery_id=payload["delivery_id"],
        )
