"""Driver consent workflows gating all data collection.

Two variants exist. The simple portal flow (BMW/Mercedes style) is: email
link, review on our platform, confirmation on the manufacturer portal,
done. The Stellantis-style flow adds identity verification, in-vehicle
privacy settings, a six-minute transmission test, a multi-day background
process and a quarterly odometer report that keeps the consent alive.

A consent permits collection exactly while its state is Active. Records
are immutable snapshots replaced by a single-writer service, so readers
always see a consistent state.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import hmac
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Optional

from .domain import CarConnectError, ConsentVariant, Vin, parse_rfc3339, rfc3339
from .timebase import EventEngine

logger = logging.getLogger(__name__)

LINK_VALIDITY_H = 72
ODOMETER_REPORT_PERIOD_DAYS = 90  # quarterly report keeps a Stellantis consent alive
IDENTITY_RETRY_LIMIT = 3
TRANSMISSION_TEST_SECONDS = 360.0
SWEEP_INTERVAL_S = 3600.0


class NotEligible(CarConnectError):
    pass


class ConsentAlreadyActive(CarConnectError):
    """An enrollment for this VIN is already active or underway."""


class WrongState(CarConnectError):
    pass


class WrongVariant(CarConnectError):
    pass


class MechanismMismatch(CarConnectError):
    """Privacy settings configured with the wrong in-vehicle mechanism."""


class CarNotDriven(CarConnectError):
    """Background processing needs at least one trip since the transmission test."""


class OdometerReportRegression(CarConnectError):
    """Reported mileage is below the previously reported value."""


class AlreadyRevoked(CarConnectError):
    pass


class LinkInvalid(CarConnectError):
    pass


class LinkExpired(CarConnectError):
    pass


class ConsentState(str, Enum):
    INITIATED = "initiated"
    EMAIL_SENT = "email_sent"
    AWAITING_OEM_CONFIRMATION = "awaiting_oem_confirmation"
    IDENTITY_VERIFICATION = "identity_verification"
    PRIVACY_SETTINGS = "privacy_settings"
    TRANSMISSION_TEST = "transmission_test"
    BACKGROUND_PROCESSING = "background_processing"
    AWAITING_ODOMETER_REPORT = "awaiting_odometer_report"
    ACTIVE = "active"
    EXPIRED = "expired"
    REVOKED = "revoked"


class PrivacyMechanism(str, Enum):
    DOUBLE_PUSH = "double_push"
    SCREEN_V1 = "screen_v1"
    SCREEN_V2 = "screen_v2"
    SCREEN_V3 = "screen_v3"


class RevokeSource(str, Enum):
    DRIVER_PORTAL = "driver_portal"
    OEM_NOTIFICATION = "oem_notification"


VARIANT_STATES: dict[ConsentVariant, frozenset[ConsentState]] = {
    ConsentVariant.SIMPLE_PORTAL: frozenset(
        {
            ConsentState.INITIATED,
            ConsentState.EMAIL_SENT,
            ConsentState.AWAITING_OEM_CONFIRMATION,
            ConsentState.ACTIVE,
            ConsentState.REVOKED,
        }
    ),
    ConsentVariant.STELLANTIS_COMPLEX: frozenset(
        {
            ConsentState.INITIATED,
            ConsentState.EMAIL_SENT,
            ConsentState.IDENTITY_VERIFICATION,
            ConsentState.PRIVACY_SETTINGS,
            ConsentState.TRANSMISSION_TEST,
            ConsentState.BACKGROUND_PROCESSING,
            ConsentState.AWAITING_ODOMETER_REPORT,
            ConsentState.ACTIVE,
            ConsentState.EXPIRED,
            ConsentState.REVOKED,
        }
    ),
}

# Declared transition edges per variant. Self-loops mark steps that may
# fail and leave the record where it was (identity retry, failed
# transmission test) or refresh it in place (quarterly odometer report).
_S = ConsentState
EDGES: dict[ConsentVariant, frozenset[tuple[ConsentState, ConsentState]]] = {
    ConsentVariant.SIMPLE_PORTAL: frozenset(
        {
            (_S.INITIATED, _S.EMAIL_SENT),
            (_S.EMAIL_SENT, _S.AWAITING_OEM_CONFIRMATION),
            (_S.EMAIL_SENT, _S.REVOKED),
            (_S.AWAITING_OEM_CONFIRMATION, _S.ACTIVE),
            (_S.AWAITING_OEM_CONFIRMATION, _S.REVOKED),
            (_S.ACTIVE, _S.REVOKED),
        }
    ),
    ConsentVariant.STELLANTIS_COMPLEX: frozenset(
        {
            (_S.INITIATED, _S.EMAIL_SENT),
            (_S.EMAIL_SENT, _S.IDENTITY_VERIFICATION),
            (_S.EMAIL_SENT, _S.REVOKED),
            (_S.IDENTITY_VERIFICATION, _S.IDENTITY_VERIFICATION),
            (_S.IDENTITY_VERIFICATION, _S.PRIVACY_SETTINGS),
            (_S.IDENTITY_VERIFICATION, _S.REVOKED),
            (_S.PRIVACY_SETTINGS, _S.TRANSMISSION_TEST),
            (_S.PRIVACY_SETTINGS, _S.REVOKED),
            (_S.TRANSMISSION_TEST, _S.TRANSMISSION_TEST),
            (_S.TRANSMISSION_TEST, _S.BACKGROUND_PROCESSING),
            (_S.TRANSMISSION_TEST, _S.REVOKED),
            (_S.BACKGROUND_PROCESSING, _S.AWAITING_ODOMETER_REPORT),
            (_S.BACKGROUND_PROCESSING, _S.REVOKED),
            (_S.AWAITING_ODOMETER_REPORT, _S.ACTIVE),
            (_S.AWAITING_ODOMETER_REPORT, _S.REVOKED),
            (_S.ACTIVE, _S.ACTIVE),
            (_S.ACTIVE, _S.EXPIRED),
            (_S.ACTIVE, _S.REVOKED),
            # An expired consent resumes with a fresh odometer report
            # instead of a full re-enrollment.
            (_S.EXPIRED, _S.ACTIVE),
            (_S.EXPIRED, _S.REVOKED),
        }
    ),
}


@dataclass(frozen=True)
class ConsentEmail:
    to: str
    subject: str
    body: str
    link_token: Optional[str] = None


class EmailOutbox:
    """Outbound email port; dev transport just records messages."""

    def __init__(self, sink: Optional[Callable[[ConsentEmail], None]] = None) -> None:
        self.messages: list[ConsentEmail] = []
        self._sink = sink

    def send(self, message: ConsentEmail) -> None:
        self.messages.append(message)
        if self._sink is not None:
            self._sink(message)
        logger.debug("consent email to %s: %s", message.to, message.subject)


def sign_link_token(secret: bytes, vin: Vin, issued_at: dt.datetime) -> str:
    issued_ms = int(issued_at.timestamp() * 1000)
    material = f"{vin.value}.{issued_ms}".encode()
    signature = hmac.new(secret, material, hashlib.sha256).hexdigest()[:32]
    return f"{vin.value}.{issued_ms}.{signature}"


def verify_link_token(secret: bytes, token: str, now: dt.datetime) -> Vin:
    """Check signature and 72-hour validity; returns the embedded VIN."""
    try:
        vin_raw, issued_ms_raw, signature = token.rsplit(".", 2)
        issued_ms = int(issued_ms_raw)
    except ValueError:
        raise LinkInvalid("malformed consent link token") from None
    material = f"{vin_raw}.{issued_ms}".encode()
    expected = hmac.new(secret, material, hashlib.sha256).hexdigest()[:32]
    if not hmac.compare_digest(expected, signature):
        raise LinkInvalid("consent link signature mismatch")
    issued_at = dt.datetime.fromtimestamp(issued_ms / 1000, tz=dt.timezone.utc)
    if now - issued_at > dt.timedelta(hours=LINK_VALIDITY_H):
        raise LinkExpired("consent link is older than 72 hours")
    return Vin(vin_raw)


@dataclass(frozen=True)
class ConsentRecord:
    """Snapshot of one VIN's consent workflow."""

    vin: Vin
    driver_email: str
    variant: ConsentVariant
    state: ConsentState
    created_at: dt.datetime
    state_changed_at: dt.datetime
    link_token: Optional[str] = None
    link_consumed: bool = False
    granted_at: Optional[dt.datetime] = None
    access_token_ref: Optional[str] = None
    refresh_token_ref: Optional[str] = None
    last_odometer_report_at: Optional[dt.datetime] = None
    last_reported_odometer_km: Optional[float] = None
    identity_retries: int = 0
    support_flagged: bool = False
    advisory: Optional[str] = None
    revoke_source: Optional[RevokeSource] = None

    @property
    def allows_collection(self) -> bool:
        return self.state is ConsentState.ACTIVE

    def to_json_dict(self) -> dict[str, Any]:
        def ts(value: Optional[dt.datetime]) -> Optional[str]:
            return rfc3339(value) if value else None

        return {
            "vin": self.vin.value,
            "driver_email": self.driver_email,
            "variant": self.variant.value,
            "state": self.state.value,
            "created_at": rfc3339(self.created_at),
            "state_changed_at": rfc3339(self.state_changed_at),
            "link_token": self.link_token,
            "link_consumed": self.link_consumed,
            "granted_at": ts(self.granted_at),
            "access_token_ref": self.access_token_ref,
            "refresh_token_ref": self.refresh_token_ref,
            "last_odometer_report_at": ts(self.last_odometer_report_at),
            "last_reported_odometer_km": self.last_reported_odometer_km,
            "identity_retries": self.identity_retries,
            "support_flagged": self.support_flagged,
            "advisory": self.advisory,
            "revoke_source": self.revoke_source.value if self.revoke_source else None,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "ConsentRecord":
        def ts(raw: Optional[str]) -> Optional[dt.datetime]:
            return parse_rfc3339(raw) if raw else None

        return cls(
            vin=Vin(payload["vin"]),
            driver_email=payload["driver_email"],
            variant=ConsentVariant(payload["variant"]),
            state=ConsentState(payload["state"]),
            created_at=parse_rfc3339(payload["created_at"]),
            state_changed_at=parse_rfc3339(payload["state_changed_at"]),
            link_token=payload.get("link_token"),
            link_consumed=bool(payload.get("link_consumed", False)),
            granted_at=ts(payload.get("granted_at")),
            access_token_ref=payload.get("access_token_ref"),
            refresh_token_ref=payload.get("refresh_token_ref"),
            last_odometer_report_at=ts(payload.get("last_odometer_report_at")),
            last_reported_odometer_km=payload.get("last_reported_odometer_km"),
            identity_retries=int(payload.get("identity_retries", 0)),
            support_flagged=bool(payload.get("support_flagged", False)),
            advisory=payload.get("advisory"),
            revoke_source=RevokeSource(payload["revoke_source"]) if payload.get("revoke_source") else None,
        )


class ConsentService:
    """Single writer for all consent records.

    Collaborators are injected as small callables so the service can run
    against the full simulator or trivial stubs:

      eligibility_gate(vin) -> bool          collection may be offered at all
      mechanism_lookup(vin) -> PrivacyMechanism   which privacy mechanism the car has
      transmission_ok(vin) -> bool           outcome of the in-car transmission test
      trips_since(vin, since) -> int         trips driven since a given instant
      credential_issuer(vin) -> (str, str)   access/refresh credential refs on activation
      on_revoked(vin) / on_activated(vin)    downstream hooks (scheduler, token cache)
    """

    def __init__(
        self,
        engine: EventEngine,
        link_secret: bytes = b"carconnect-consent-link",
        eligibility_gate: Callable[[Vin], bool] = lambda vin: True,
        mechanism_lookup: Callable[[Vin], PrivacyMechanism] = lambda vin: PrivacyMechanism.DOUBLE_PUSH,
        transmission_ok: Callable[[Vin], bool] = lambda vin: True,
        trips_since: Callable[[Vin, dt.datetime], int] = lambda vin, since: 1,
        credential_issuer: Optional[Callable[[Vin], tuple[str, str]]] = None,
        on_revoked: Optional[Callable[[Vin], None]] = None,
        on_activated: Optional[Callable[[Vin], None]] = None,
        outbox: Optional[EmailOutbox] = None,
        transmission_test_s: float = TRANSMISSION_TEST_SECONDS,
    ) -> None:
        self.engine = engine
        self.link_secret = link_secret
        self.eligibility_gate = eligibility_gate
        self.mechanism_lookup = mechanism_lookup
        self.transmission_ok = transmission_ok
        self.trips_since = trips_since
        self.credential_issuer = credential_issuer or self._default_credentials
        self.on_revoked = on_revoked
        self.on_activated = on_activated
        self.outbox = outbox or EmailOutbox()
        self.transmission_test_s = transmission_test_s
        self._records: dict[str, ConsentRecord] = {}
        self._credential_seq = 0

    def _default_credentials(self, vin: Vin) -> tuple[str, str]:
        self._credential_seq += 1
        return (f"cred-access-{vin.value}-{self._credential_seq}", f"cred-refresh-{vin.value}-{self._credential_seq}")

    # -- helpers -------------------------------------------------------------

    def record(self, vin: Vin) -> Optional[ConsentRecord]:
        return self._records.get(vin.value)

    def records(self) -> list[ConsentRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def allows_collection(self, vin: Vin) -> bool:
        record = self._records.get(vin.value)
        return record is not None and record.allows_collection

    def _now(self) -> dt.datetime:
        return self.engine.clock.now()

    def _transition(self, record: ConsentRecord, new_state: ConsentState, **changes: Any) -> ConsentRecord:
        edge = (record.state, new_state)
        if edge not in EDGES[record.variant]:
            raise WrongState(f"{record.vin}: no edge {record.state.value} -> {new_state.value}")
        updated = replace(record, state=new_state, state_changed_at=self._now(), **changes)
        self._records[record.vin.value] = updated
        return updated

    def _store(self, record: ConsentRecord) -> ConsentRecord:
        self._records[record.vin.value] = record
        return record

    def _require_state(self, record: ConsentRecord, *states: ConsentState) -> None:
        if record.state not in states:
            raise WrongState(
                f"{record.vin}: operation requires {'/'.join(s.value for s in states)}, record is {record.state.value}"
            )

    # -- operations ------------------------------------------------------------

    def initiate(self, vin: Vin, driver_email: str, variant: ConsentVariant) -> ConsentRecord:
        """Start an enrollment: creates the record and issues the email link."""
        if not self.eligibility_gate(vin):
            raise NotEligible(f"VIN {vin} is not eligible for collection")
        existing = self._records.get(vin.value)
        if existing is not None and existing.state not in (ConsentState.REVOKED, ConsentState.EXPIRED):
            raise ConsentAlreadyActive(f"consent for {vin} is already {existing.state.value}")
        now = self._now()
        record = ConsentRecord(
            vin=vin,
            driver_email=driver_email,
            variant=variant,
            state=ConsentState.INITIATED,
            created_at=now,
            state_changed_at=now,
        )
        self._store(record)
        token = sign_link_token(self.link_secret, vin, now)
        record = self._transition(record, ConsentState.EMAIL_SENT, link_token=token, link_consumed=False)
        self.outbox.send(
            ConsentEmail(
                to=driver_email,
                subject="Confirm data collection for your vehicle",
                body=f"Review and approve data collection for vehicle {vin.value}.",
                link_token=token,
            )
        )
        return record

    def accept_review(self, vin: Vin, link_token: str, approved: bool = True) -> ConsentRecord:
        """Driver followed the email link, reviewed the data points, decided."""
        record = self._require(vin)
        self._require_state(record, ConsentState.EMAIL_SENT)
        token_vin = verify_link_token(self.link_secret, link_token, self._now())
        if token_vin != vin or link_token != record.link_token:
            raise LinkInvalid("link token does not match this consent")
        if record.link_consumed:
            raise LinkInvalid("consent link already used")
        if not approved:
            return self._revoke(record, RevokeSource.DRIVER_PORTAL)
        next_state = (
            ConsentState.AWAITING_OEM_CONFIRMATION
            if record.variant is ConsentVariant.SIMPLE_PORTAL
            else ConsentState.IDENTITY_VERIFICATION
        )
        return self._transition(record, next_state, link_consumed=True)

    def confirm_on_oem_portal(self, vin: Vin, approved: bool) -> ConsentRecord:
        record = self._require(vin)
        if record.variant is not ConsentVariant.SIMPLE_PORTAL:
            raise WrongVariant(f"{vin}: manufacturer-portal confirmation applies to the simple flow only")
        self._require_state(record, ConsentState.AWAITING_OEM_CONFIRMATION)
        if not approved:
            return self._revoke(record, RevokeSource.DRIVER_PORTAL)
        return self._activate(record)

    def verify_identity(self, vin: Vin, passed: bool) -> ConsentRecord:
        record = self._require(vin)
        self._require_state(record, ConsentState.IDENTITY_VERIFICATION)
        if passed:
            return self._transition(record, ConsentState.PRIVACY_SETTINGS)
        retries = record.identity_retries + 1
        return self._transition(
            record,
            ConsentState.IDENTITY_VERIFICATION,
            identity_retries=retries,
            support_flagged=retries >= IDENTITY_RETRY_LIMIT,
        )

    def lookup_mechanism(self, vin: Vin) -> PrivacyMechanism:
        """Which privacy mechanism is installed, precomputed from the VIN."""
        return self.mechanism_lookup(vin)

    def configure_privacy_settings(self, vin: Vin, mechanism: PrivacyMechanism) -> ConsentRecord:
        record = self._require(vin)
        self._require_state(record, ConsentState.PRIVACY_SETTINGS)
        required = self.mechanism_lookup(vin)
        if mechanism is not required:
            raise MechanismMismatch(f"{vin}: vehicle uses {required.value}, not {mechanism.value}")
        return self._transition(record, ConsentState.TRANSMISSION_TEST)

    def run_transmission_test(self, vin: Vin) -> ConsentRecord:
        """Six simulated minutes from engine start-up to shutdown."""
        record = self._require(vin)
        self._require_state(record, ConsentState.TRANSMISSION_TEST)
        self.engine.clock.advance(self.transmission_test_s)
        if self.transmission_ok(vin):
            return self._transition(record, ConsentState.BACKGROUND_PROCESSING)
        return self._transition(
            record,
            ConsentState.TRANSMISSION_TEST,
            advisory="transmission test failed: visit a workshop to fix the data transmission",
        )

    def complete_background_processing(self, vin: Vin) -> ConsentRecord:
        record = self._require(vin)
        self._require_state(record, ConsentState.BACKGROUND_PROCESSING)
        if self.trips_since(vin, record.state_changed_at) < 1:
            raise CarNotDriven(f"{vin}: the car must be driven before processing can finish")
        updated = self._transition(record, ConsentState.AWAITING_ODOMETER_REPORT)
        self.outbox.send(
            ConsentEmail(
                to=record.driver_email,
                subject="Report your vehicle mileage",
                body=f"Please report the current odometer reading of {vin.value} to start the connection.",
            )
        )
        return updated

    def report_odometer(self, vin: Vin, km: float, at: Optional[dt.datetime] = None) -> ConsentRecord:
        record = self._require(vin)
        if record.variant is not ConsentVariant.STELLANTIS_COMPLEX:
            raise WrongVariant(f"{vin}: odometer reports belong to the complex flow only")
        self._require_state(
            record, ConsentState.AWAITING_ODOMETER_REPORT, ConsentState.ACTIVE, ConsentState.EXPIRED
        )
        if km < 0:
            raise OdometerReportRegression("odometer must be non-negative")
        if record.last_reported_odometer_km is not None and km < record.last_reported_odometer_km:
            raise OdometerReportRegression(
                f"{vin}: reported {km} km below previous report {record.last_reported_odometer_km} km"
            )
        at = at or self._now()
        changes = {"last_odometer_report_at": at, "last_reported_odometer_km": float(km)}
        if record.state is ConsentState.ACTIVE:
            return self._transition(record, ConsentState.ACTIVE, **changes)
        if record.state is ConsentState.EXPIRED:
            # Resumption path: one fresh report revives the connection.
            updated = self._transition(record, ConsentState.ACTIVE, **changes)
            if self.on_activated is not None:
                self.on_activated(vin)
            return updated
        updated = replace(record, **changes)
        self._store(updated)
        return self._activate(updated)

    def revoke(self, vin: Vin, source: RevokeSource) -> ConsentRecord:
        record = self._require(vin)
        if record.state is ConsentState.REVOKED:
            raise AlreadyRevoked(f"consent for {vin} is already revoked")
        return self._revoke(record, source)

    def _revoke(self, record: ConsentRecord, source: RevokeSource) -> ConsentRecord:
        updated = self._transition(
            record,
            ConsentState.REVOKED,
            revoke_source=source,
            access_token_ref=None,
            refresh_token_ref=None,
        )
        if self.on_revoked is not None:
            self.on_revoked(record.vin)
        return updated

    def _activate(self, record: ConsentRecord) -> ConsentRecord:
        access_ref, refresh_ref = self.credential_issuer(record.vin)
        updated = self._transition(
            record,
            ConsentState.ACTIVE,
            granted_at=self._now(),
            access_token_ref=access_ref,
            refresh_token_ref=refresh_ref,
        )
        if self.on_activated is not None:
            self.on_activated(record.vin)
        return updated

    def _require(self, vin: Vin) -> ConsentRecord:
        record = self._records.get(vin.value)
        if record is None:
            raise WrongState(f"no consent record for {vin}")
        return record

    # -- expiry sweeper -----------------------------------------------------------

    def sweep_expirations(self) -> list[ConsentRecord]:
        """Expire Stellantis consents whose quarterly report lapsed (> 90 days)."""
        now = self._now()
        expired = []
        for key in sorted(self._records):
            record = self._records[key]
            if record.variant is not ConsentVariant.STELLANTIS_COMPLEX:
                continue
            if record.state is not ConsentState.ACTIVE:
                continue
            reference = record.last_odometer_report_at or record.granted_at
            if reference is None:
                continue
            if now - reference > dt.timedelta(days=ODOMETER_REPORT_PERIOD_DAYS):
                expired.append(self._transition(record, ConsentState.EXPIRED))
        return expired

    def schedule_sweeper(self, interval_s: float = SWEEP_INTERVAL_S) -> None:
        def tick() -> None:
            self.sweep_expirations()
            self.engine.schedule_in(interval_s, tick, label="consent-sweep")

        self.engine.schedule_in(interval_s, tick, label="consent-sweep")
