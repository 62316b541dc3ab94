"""Platform-side collection: webhook receiver, request client, scheduler.

Incoming webhooks are signature-checked, deduplicated by delivery id and
routed: location changes trigger data requests (and are never stored as
events), revocations flow into the consent service, everything else is
persisted. Outgoing requests honor each brand's quota through a local
mirror so the upstream never answers 429, refresh OAuth tokens
transparently, and retry on upstream outages. A poll scheduler fires the
twice-daily odometer collection for odometer-only brands.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import hmac
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Optional
from zoneinfo import ZoneInfo

from .consent import ConsentService, ConsentState, RevokeSource
from .domain import (
    CarConnectError,
    DataPointKind,
    NotificationEvent,
    NotificationKind,
    OemProfile,
    ProfileRegistry,
    QuotaMode,
    TelemetrySample,
    Vin,
    parse_rfc3339,
    rfc3339,
)
from .ratelimit import DailySlotBudget, SlidingWindowLimiter
from .simulator import (
    BRAND_HEADER,
    DELIVERY_ID_HEADER,
    SIGNATURE_HEADER,
    OemCloudSimulator,
    QuotaExceeded,
    Unauthorized,
    UnsupportedKind,
    UpstreamUnavailable,
    InvalidGrant,
    ConsentRevokedUpstream,
)
from .storage import SeriesStore, StaticStore
from .timebase import EventEngine, next_local_time

logger = logging.getLogger(__name__)

LOCAL_QUOTA_FACTOR = 0.9  # mirror sliding-window quotas at 90% capacity
UPSTREAM_RETRY_DELAYS_S = (30.0, 60.0, 120.0)  # max 3 retries after a failure
POLL_SLOT_TOLERANCE_S = 900.0  # slot sample accepted within +/- 15 min
DEFAULT_TRIGGER_COOLDOWN_S = 3600.0


class ConsentInactive(CarConnectError):
    pass


class MissingSlot(CarConnectError):
    """Night-distance computation lacks one of the two bracketing polls."""


class NoCredentials(CarConnectError):
    pass


class CollectionMode(str, Enum):
    SCHEDULED_POLLS = "scheduled_polls"
    NOTIFICATION_TRIGGERED = "notification_triggered"


@dataclass(frozen=True)
class CollectionPolicy:
    """Per-brand collection strategy."""

    brand: str
    mode: CollectionMode
    poll_times: tuple[tuple[int, int], ...] = ()  # (hour, minute) local
    poll_kinds: frozenset[DataPointKind] = frozenset()
    on_notification: Mapping[NotificationKind, frozenset[DataPointKind]] = field(default_factory=dict)
    # Minimum spacing between notification-triggered requests per VIN; one
    # full snapshot per journey is the cost-efficient default.
    trigger_cooldown_s: float = DEFAULT_TRIGGER_COOLDOWN_S

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "brand": self.brand,
            "mode": self.mode.value,
            "poll_times": [f"{h:02d}:{m:02d}" for h, m in self.poll_times],
            "poll_kinds": sorted(k.value for k in self.poll_kinds),
            "on_notification": {
                kind.value: sorted(k.value for k in kinds) for kind, kinds in self.on_notification.items()
            },
            "trigger_cooldown_s": self.trigger_cooldown_s,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "CollectionPolicy":
        times = []
        for raw in payload.get("poll_times", []):
            hour, minute = raw.split(":")
            times.append((int(hour), int(minute)))
        return cls(
            brand=payload["brand"],
            mode=CollectionMode(payload["mode"]),
            poll_times=tuple(times),
            poll_kinds=frozenset(DataPointKind(k) for k in payload.get("poll_kinds", [])),
            on_notification={
                NotificationKind(kind): frozenset(DataPointKind(k) for k in kinds)
                for kind, kinds in payload.get("on_notification", {}).items()
            },
            trigger_cooldown_s=float(payload.get("trigger_cooldown_s", DEFAULT_TRIGGER_COOLDOWN_S)),
        )


def default_policy_for(profile: OemProfile) -> CollectionPolicy:
    """The shipped strategy: poll odometer-only brands at 05:00/22:00,
    request everything else on location-change notifications."""
    if profile.request_kinds == frozenset({DataPointKind.ODOMETER}):
        return CollectionPolicy(
            brand=profile.brand,
            mode=CollectionMode.SCHEDULED_POLLS,
            poll_times=((5, 0), (22, 0)),
            poll_kinds=frozenset({DataPointKind.ODOMETER}),
        )
    return CollectionPolicy(
        brand=profile.brand,
        mode=CollectionMode.NOTIFICATION_TRIGGERED,
        on_notification={NotificationKind.LOCATION_CHANGE: profile.request_kinds},
    )


def dense_policies(registry: ProfileRegistry) -> dict[str, CollectionPolicy]:
    """Request on every location change (no cooldown): costs more data
    volume but gives the fix density trip analytics needs."""
    policies = {}
    for profile in registry:
        policy = default_policy_for(profile)
        if policy.mode is CollectionMode.NOTIFICATION_TRIGGERED:
            policy = CollectionPolicy(
                brand=policy.brand,
                mode=policy.mode,
                on_notification=policy.on_notification,
                trigger_cooldown_s=0.0,
            )
        policies[profile.brand] = policy
    return policies


class Disposition(str, Enum):
    STORED = "stored"
    TRIGGERED_REQUEST = "triggered_request"
    IGNORED_DUPLICATE = "ignored_duplicate"
    REJECTED_BAD_SIGNATURE = "rejected_bad_signature"
    QUARANTINED_UNKNOWN_VIN = "quarantined_unknown_vin"
    IGNORED_INACTIVE = "ignored_inactive"
    IGNORED_THROTTLED = "ignored_throttled"


@dataclass(frozen=True)
class DeliveryRecord:
    delivery_id: str
    vin: Optional[str]
    kind: Optional[str]
    received_at: dt.datetime
    disposition: Disposition

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "delivery_id": self.delivery_id,
            "vin": self.vin,
            "kind": self.kind,
            "received_at": rfc3339(self.received_at),
            "disposition": self.disposition.value,
        }


class Metrics:
    """Flat counter registry, rendered as `name value` lines."""

    CORE = ("samples_stored", "slots_missed", "quota_deferred", "webhooks_rejected")

    def __init__(self) -> None:
        self.counters: dict[str, int] = {name: 0 for name in self.CORE}

    def inc(self, name: str, amount: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + amount

    def get(self, name: str) -> int:
        return self.counters.get(name, 0)

    def render_text(self) -> str:
        return "\n".join(f"{name} {self.counters[name]}" for name in sorted(self.counters)) + "\n"


class TokenManager:
    """Holds OAuth credentials per VIN and refreshes them transparently.

    The consent workflow stores only opaque credential references; the
    actual tokens live here, keyed by VIN.
    """

    def __init__(self, oem: OemCloudSimulator, engine: EventEngine) -> None:
        self.oem = oem
        self.engine = engine
        self._auth_codes: dict[str, str] = {}
        self._grants: dict[str, tuple[str, str, dt.datetime]] = {}  # vin -> (access, refresh, expires_at)
        self.refresh_count = 0

    def provision(self, vin: Vin) -> tuple[str, str]:
        """Called on consent activation; fetches an authorization code and
        returns opaque credential refs for the consent record."""
        code = self.oem.issue_auth_code(vin)
        self._auth_codes[vin.value] = code
        self._grants.pop(vin.value, None)
        return (f"cred-access-{vin.value}", f"cred-refresh-{vin.value}")

    def invalidate(self, vin: Vin) -> None:
        self._auth_codes.pop(vin.value, None)
        self._grants.pop(vin.value, None)

    def access_token(self, vin: Vin) -> str:
        now = self.engine.clock.now()
        grant = self._grants.get(vin.value)
        if grant is not None and now < grant[2]:
            return grant[0]
        if grant is not None:
            # expired: one refresh-token exchange, rotating the pair
            try:
                return self._exchange(vin, refresh_token=grant[1])
            except InvalidGrant:
                pass  # fall back to the auth code if one is left
        code = self._auth_codes.pop(vin.value, None)
        if code is None:
            raise NoCredentials(f"no usable credentials for {vin}")
        return self._exchange(vin, grant_code=code)

    def force_refresh(self, vin: Vin) -> str:
        grant = self._grants.get(vin.value)
        if grant is None:
            return self.access_token(vin)
        return self._exchange(vin, refresh_token=grant[1])

    def _exchange(self, vin: Vin, grant_code: Optional[str] = None, refresh_token: Optional[str] = None) -> str:
        grant = self.oem.token_exchange(grant_code=grant_code, refresh_token=refresh_token)
        if refresh_token is not None:
            self.refresh_count += 1
        expires_at = self.engine.clock.now() + dt.timedelta(seconds=grant.expires_in)
        self._grants[vin.value] = (grant.access_token, grant.refresh_token, expires_at)
        return grant.access_token


@dataclass
class PendingRequest:
    vin: Vin
    kinds: frozenset[DataPointKind]
    reason: str  # "notification" | "poll" | "manual"
    attempts: int = 0
    # Poll requests die at their slot boundary: a late odometer read would
    # corrupt the night-distance estimate, so slots are never back-filled.
    expires_at: Optional[dt.datetime] = None


class _CredentialFailure(CarConnectError):
    pass


class _TransientUpstream(CarConnectError):
    pass


class IngestionPlatform:
    """The collection half of the platform, wired around one event engine."""

    def __init__(
        self,
        engine: EventEngine,
        registry: ProfileRegistry,
        consents: ConsentService,
        oem: OemCloudSimulator,
        series: SeriesStore,
        statics: StaticStore,
        policies: Optional[Mapping[str, CollectionPolicy]] = None,
        webhook_secret: Callable[[str], bytes] = lambda brand: f"oem-secret-{brand}".encode(),
        platform_down: Callable[[dt.datetime], bool] = lambda ts: False,
        tokens: Optional[TokenManager] = None,
    ) -> None:
        self.engine = engine
        self.registry = registry
        self.consents = consents
        self.oem = oem
        self.series = series
        self.statics = statics
        self.webhook_secret = webhook_secret
        self.platform_down = platform_down
        self.tokens = tokens or TokenManager(oem, engine)
        self.metrics = Metrics()
        self.policies: dict[str, CollectionPolicy] = dict(policies or {})
        self.delivery_log: list[DeliveryRecord] = []
        self.quarantine: list[dict[str, Any]] = []
        self._seen_deliveries: set[str] = set()
        self._last_trigger: dict[str, dt.datetime] = {}
        self._local_limiters: dict[str, SlidingWindowLimiter | DailySlotBudget] = {}
        self._polls_scheduled: set[str] = set()

    # -- wiring helpers ----------------------------------------------------------

    def policy_for_brand(self, brand: str) -> CollectionPolicy:
        policy = self.policies.get(brand)
        if policy is None:
            policy = default_policy_for(self.registry.profile_for(brand))
            self.policies[brand] = policy
        return policy

    def _policy_for_vin(self, vin: Vin) -> Optional[CollectionPolicy]:
        vehicle = self.statics.get_vehicle(vin)
        if vehicle is None:
            return None
        return self.policy_for_brand(vehicle.brand)

    def _limiter_for(self, vin: Vin):
        limiter = self._local_limiters.get(vin.value)
        if limiter is None:
            vehicle = self.statics.get_vehicle(vin)
            if vehicle is None:
                raise CarConnectError(f"vehicle {vin} is not registered")
            profile = self.registry.profile_for(vehicle.brand)
            quota = profile.request_quota
            if quota.mode is QuotaMode.DAILY_SLOTS:
                tz = ZoneInfo(self.oem.state_for(vin).config.timezone) if vin.value in self.oem.vehicles else None
                limiter = DailySlotBudget(quota.max_requests, tz or ZoneInfo("Europe/Luxembourg"))
            else:
                limiter = SlidingWindowLimiter(
                    max(1, int(quota.max_requests * LOCAL_QUOTA_FACTOR)), quota.window_s
                )
            self._local_limiters[vin.value] = limiter
        return limiter

    # -- consent lifecycle hooks ---------------------------------------------------

    def on_consent_activated(self, vin: Vin) -> None:
        policy = self._policy_for_vin(vin)
        if policy is not None and policy.mode is CollectionMode.SCHEDULED_POLLS:
            self._schedule_next_poll(vin, policy)

    def on_consent_revoked(self, vin: Vin) -> None:
        self.tokens.invalidate(vin)
        self.oem.revoke_tokens(vin)
        self._polls_scheduled.discard(vin.value)

    # -- webhook receiver -------------------------------------------------------------

    def receive_webhook(self, body: bytes, headers: Mapping[str, str]) -> DeliveryRecord:
        now = self.engine.clock.now()
        headers = {k.lower(): v for k, v in headers.items()}
        delivery_id = headers.get(DELIVERY_ID_HEADER, "")
        brand = headers.get(BRAND_HEADER, "")
        signature = headers.get(SIGNATURE_HEADER, "")
        expected = hmac.new(self.webhook_secret(brand), body, hashlib.sha256).hexdigest()
        if not signature or not hmac.compare_digest(expected, signature):
            self.metrics.inc("webhooks_rejected")
            logger.warning("webhook rejected: bad signature (delivery_id=%s)", delivery_id or "?")
            return self._log_delivery(delivery_id or "unsigned", None, None, now, Disposition.REJECTED_BAD_SIGNATURE)
        event = NotificationEvent.from_json_dict(json.loads(body.decode()))
        if event.delivery_id in self._seen_deliveries:
            self.metrics.inc("webhooks_duplicate")
            return self._log_delivery(
                event.delivery_id, event.vin.value, event.kind.value, now, Disposition.IGNORED_DUPLICATE
            )
        self._seen_deliveries.add(event.delivery_id)
        if self.statics.get_vehicle(event.vin) is None:
            self.quarantine.append(event.to_json_dict())
            self.metrics.inc("webhooks_quarantined")
            return self._log_delivery(
                event.delivery_id, event.vin.value, event.kind.value, now, Disposition.QUARANTINED_UNKNOWN_VIN
            )
        self.metrics.inc("webhooks_received")
        if event.kind is NotificationKind.REVOKE_OF_CONSENT:
            return self._handle_revoke(event, now)
        if event.kind is NotificationKind.LOCATION_CHANGE:
            # Never stored as an event: it only triggers the data request.
            return self._handle_trigger(event, now)
        stored = self.series.append_events([event])
        self.metrics.inc("events_stored", stored)
        policy = self._policy_for_vin(event.vin)
        if policy and event.kind in policy.on_notification and self.consents.allows_collection(event.vin):
            self._enqueue_request(event.vin, policy.on_notification[event.kind], reason="notification")
        return self._log_delivery(event.delivery_id, event.vin.value, event.kind.value, now, Disposition.STORED)

    def _handle_revoke(self, event: NotificationEvent, now: dt.datetime) -> DeliveryRecord:
        stored = self.series.append_events([event])
        self.metrics.inc("events_stored", stored)
        record = self.consents.record(event.vin)
        if record is not None and record.state is not ConsentState.REVOKED:
            self.consents.revoke(event.vin, RevokeSource.OEM_NOTIFICATION)
        return self._log_delivery(event.delivery_id, event.vin.value, event.kind.value, now, Disposition.STORED)

    def _handle_trigger(self, event: NotificationEvent, now: dt.datetime) -> DeliveryRecord:
        policy = self._policy_for_vin(event.vin)
        kinds = policy.on_notification.get(event.kind) if policy else None
        if not kinds:
            return self._log_delivery(
                event.delivery_id, event.vin.value, event.kind.value, now, Disposition.IGNORED_INACTIVE
            )
        if not self.consents.allows_collection(event.vin):
            self.metrics.inc("requests_skipped_inactive")
            return self._log_delivery(
                event.delivery_id, event.vin.value, event.kind.value, now, Disposition.IGNORED_INACTIVE
            )
        last = self._last_trigger.get(event.vin.value)
        if last is not None and (now - last).total_seconds() < policy.trigger_cooldown_s:
            return self._log_delivery(
                event.delivery_id, event.vin.value, event.kind.value, now, Disposition.IGNORED_THROTTLED
            )
        self._last_trigger[event.vin.value] = now
        self._enqueue_request(event.vin, kinds, reason="notification")
        return self._log_delivery(
            event.delivery_id, event.vin.value, event.kind.value, now, Disposition.TRIGGERED_REQUEST
        )

    def _log_delivery(
        self, delivery_id: str, vin: Optional[str], kind: Optional[str], at: dt.datetime, disposition: Disposition
    ) -> DeliveryRecord:
        record = DeliveryRecord(delivery_id=delivery_id, vin=vin, kind=kind, received_at=at, disposition=disposition)
        self.delivery_log.append(record)
        return record

    # -- request execution ---------------------------------------------------------------

    def _enqueue_request(
        self, vin: Vin, kinds: Iterable[DataPointKind], reason: str, expires_at: Optional[dt.datetime] = None
    ) -> None:
        request = PendingRequest(vin=vin, kinds=frozenset(kinds), reason=reason, expires_at=expires_at)
        self.metrics.inc("requests_enqueued")
        self.engine.schedule_in(0.0, lambda: self._execute(request), label=f"request:{vin}")

    def execute_request(self, vin: Vin, kinds: Iterable[DataPointKind], reason: str = "manual") -> None:
        """Public entry: queue a data request for immediate execution."""
        self._enqueue_request(vin, kinds, reason)

    def _give_up(self, request: PendingRequest, metric: str) -> None:
        self.metrics.inc(metric)
        if request.reason == "poll":
            self.metrics.inc("slots_missed")

    def _execute(self, request: PendingRequest) -> None:
        now = self.engine.clock.now()
        vin = request.vin
        if request.expires_at is not None and now > request.expires_at:
            self._give_up(request, "requests_expired")
            return
        if not self.consents.allows_collection(vin):
            self.metrics.inc("requests_skipped_inactive")
            return
        limiter = self._limiter_for(vin)
        if not limiter.try_acquire(now):
            # Local mirror says the upstream budget is gone: defer, never 429.
            self.metrics.inc("quota_deferred")
            retry_at = limiter.next_free(now)
            if request.expires_at is not None and retry_at > request.expires_at:
                self._give_up(request, "requests_expired")
                return
            self.engine.schedule_at(retry_at, lambda: self._execute(request), label=f"deferred:{vin}")
            return
        try:
            samples = self._fetch_with_refresh(request)
        except _CredentialFailure:
            limiter.refund(now)
            self.metrics.inc("requests_failed_credentials")
            return
        except UnsupportedKind:
            limiter.refund(now)
            self.metrics.inc("requests_failed_unsupported")
            return
        except _TransientUpstream:
            # The upstream never counted the call; give the permit back.
            limiter.refund(now)
            self._retry_later(request)
            return
        result = self.series.append_samples(samples)
        self.metrics.inc("samples_stored", result.written)
        self.metrics.inc("requests_executed")
        if request.reason == "poll":
            self.metrics.inc("poll_slots_collected")

    def _fetch_with_refresh(self, request: PendingRequest) -> list[TelemetrySample]:
        """One upstream data call, with a single transparent token refresh."""
        vin = request.vin
        kinds = sorted(request.kinds, key=lambda k: k.value)
        try:
            token = self.tokens.access_token(vin)
        except (NoCredentials, InvalidGrant, ConsentRevokedUpstream) as exc:
            raise _CredentialFailure(str(exc)) from exc
        try:
            return self.oem.fetch_data(vin, kinds, token)
        except Unauthorized:
            pass  # token aged out between mint and use: refresh once, retry
        except QuotaExceeded as exc:
            self.metrics.inc("upstream_429_observed")
            raise _TransientUpstream(str(exc)) from exc
        except UpstreamUnavailable as exc:
            raise _TransientUpstream(str(exc)) from exc
        try:
            token = self.tokens.force_refresh(vin)
            return self.oem.fetch_data(vin, kinds, token)
        except (Unauthorized, InvalidGrant, ConsentRevokedUpstream, NoCredentials) as exc:
            raise _CredentialFailure(str(exc)) from exc
        except QuotaExceeded as exc:
            self.metrics.inc("upstream_429_observed")
            raise _TransientUpstream(str(exc)) from exc
        except UpstreamUnavailable as exc:
            raise _TransientUpstream(str(exc)) from exc

    def _retry_later(self, request: PendingRequest) -> None:
        if request.attempts >= len(UPSTREAM_RETRY_DELAYS_S):
            self._give_up(request, "requests_failed_upstream")
            return
        delay = UPSTREAM_RETRY_DELAYS_S[request.attempts]
        request.attempts += 1
        if request.expires_at is not None and self.engine.clock.now() + dt.timedelta(seconds=delay) > request.expires_at:
            self._give_up(request, "requests_expired")
            return
        self.metrics.inc("requests_retried")
        self.engine.schedule_in(delay, lambda: self._execute(request), label=f"retry:{request.vin}")

    # -- poll scheduler ------------------------------------------------------------------

    def _schedule_next_poll(self, vin: Vin, policy: CollectionPolicy) -> None:
        if vin.value in self._polls_scheduled:
            return
        self._polls_scheduled.add(vin.value)
        self._schedule_poll_event(vin, policy)

    def _schedule_poll_event(self, vin: Vin, policy: CollectionPolicy) -> None:
        tz = ZoneInfo(self.oem.state_for(vin).config.timezone) if vin.value in self.oem.vehicles else ZoneInfo("Europe/Luxembourg")
        now = self.engine.clock.now()
        next_slot = min(next_local_time(now, hour, minute, tz) for hour, minute in policy.poll_times)
        self.engine.schedule_at(next_slot, lambda: self._fire_poll(vin, policy), label=f"poll:{vin}")

    def _fire_poll(self, vin: Vin, policy: CollectionPolicy) -> None:
        now = self.engine.clock.now()
        record = self.consents.record(vin)
        if record is None or record.state is ConsentState.REVOKED:
            # Collection for this VIN is over; do not reschedule.
            self._polls_scheduled.discard(vin.value)
            return
        if record.allows_collection:
            if self.platform_down(now):
                # The slot has passed by the time we are back: no backfill,
                # a late odometer read would mislabel night distance.
                self.metrics.inc("slots_missed")
            else:
                self.metrics.inc("poll_slots_fired")
                expires = now + dt.timedelta(seconds=POLL_SLOT_TOLERANCE_S)
                self._enqueue_request(vin, policy.poll_kinds, reason="poll", expires_at=expires)
        self._schedule_poll_event(vin, policy)

    # -- derived: poll-based night distance ---------------------------------------------

    def nightly_distance_from_polls(self, vin: Vin, day: dt.date, tz: Optional[ZoneInfo] = None) -> float:
        """Kilometers driven between the 22:00 poll of `day` and the 05:00
        poll of the next day, from odometer readings alone."""
        tz = tz or (
            ZoneInfo(self.oem.state_for(vin).config.timezone)
            if vin.value in self.oem.vehicles
            else ZoneInfo("Europe/Luxembourg")
        )
        evening = dt.datetime.combine(day, dt.time(22, 0), tzinfo=tz)
        morning = dt.datetime.combine(day + dt.timedelta(days=1), dt.time(5, 0), tzinfo=tz)
        odo_evening = self._slot_sample(vin, evening)
        odo_morning = self._slot_sample(vin, morning)
        if odo_evening is None:
            raise MissingSlot(f"no odometer poll near {evening.isoformat()}")
        if odo_morning is None:
            raise MissingSlot(f"no odometer poll near {morning.isoformat()}")
        return float(odo_morning.value) - float(odo_evening.value)

    def _slot_sample(self, vin: Vin, slot: dt.datetime) -> Optional[TelemetrySample]:
        tolerance = dt.timedelta(seconds=POLL_SLOT_TOLERANCE_S)
        samples = self.series.query_series(vin, DataPointKind.ODOMETER, slot - tolerance, slot + tolerance)
        if not samples:
            return None
        return min(samples, key=lambda s: abs((s.observed_at - slot).total_seconds()))
