"""HTTP surface over a running scenario.

One FastAPI app exposes both halves of the world: the platform
(consents, webhooks, series queries, analytics reports, metrics) and the
simulated aggregator (OAuth token endpoint, vehicle-data API, simulation
control). The single-page console consumes only these routes and is
served as static files under /console when its build output exists.

Handlers serialize through one lock so an auto-advancing clock thread
and HTTP requests never interleave inside the engine.
"""

from __future__ import annotations

import datetime as dt
import json
import secrets
import threading
from pathlib import Path
from typing import Any, Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from .analytics import (
    NoDataForVin,
    NoDataInPeriod,
    NonPositivePremium,
    build_risk_features,
    cost_viability,
    segment_trips,
    theft_report,
)
from .consent import (
    AlreadyRevoked,
    CarNotDriven,
    ConsentAlreadyActive,
    LinkExpired,
    LinkInvalid,
    MechanismMismatch,
    NotEligible,
    OdometerReportRegression,
    PrivacyMechanism,
    RevokeSource,
    WrongState,
    WrongVariant,
)
from .domain import (
    CarConnectError,
    DataPointKind,
    UnknownBrand,
    VinError,
    parse_rfc3339,
    parse_vin,
    rfc3339,
)
from .eligibility import PendingChecksRemain, RequirementNotChecked, UnknownVinAtOem
from .scenario import Scenario
from .simulator import (
    ConsentRevokedUpstream,
    InvalidGrant,
    QuotaExceeded,
    Unauthorized,
    UnknownVehicle,
    UnsupportedKind,
    UpstreamUnavailable,
)

_STATUS_BY_ERROR: list[tuple[type, int]] = [
    (VinError, 400),
    (LinkExpired, 410),
    (LinkInvalid, 400),
    (NotEligible, 409),
    (ConsentAlreadyActive, 409),
    (WrongState, 409),
    (WrongVariant, 409),
    (MechanismMismatch, 409),
    (CarNotDriven, 409),
    (OdometerReportRegression, 409),
    (AlreadyRevoked, 409),
    (RequirementNotChecked, 409),
    (PendingChecksRemain, 409),
    (UnknownVinAtOem, 404),
    (UnknownBrand, 404),
    (UnknownVehicle, 404),
    (NoDataForVin, 404),
    (NoDataInPeriod, 404),
    (NonPositivePremium, 400),
    (InvalidGrant, 400),
    (ConsentRevokedUpstream, 403),
    (Unauthorized, 401),
    (QuotaExceeded, 429),
    (UnsupportedKind, 400),
    (UpstreamUnavailable, 503),
]


def _status_for(exc: CarConnectError) -> int:
    for klass, status in _STATUS_BY_ERROR:
        if isinstance(exc, klass):
            return status
    return 422


class SessionStore:
    """Bearer-token sessions with a driver/operator authorization split."""

    def __init__(self) -> None:
        self._sessions: dict[str, dict[str, Any]] = {}

    def create(self, role: str, subject: str, vin: Optional[str] = None) -> dict[str, Any]:
        token = f"{role[:2]}-{secrets.token_hex(16)}"
        session = {"token": token, "role": role, "subject": subject, "vin": vin}
        self._sessions[token] = session
        return session

    def get(self, token: str) -> Optional[dict[str, Any]]:
        return self._sessions.get(token)


def create_app(scenario: Scenario, console_dir: Optional[Path | str] = None) -> FastAPI:
    app = FastAPI(title="carconnect", version="0.1.0", docs_url=None, redoc_url=None)
    lock = threading.RLock()
    sessions = SessionStore()
    app.state.scenario = scenario
    app.state.lock = lock
    app.state.sessions = sessions

    @app.exception_handler(CarConnectError)
    async def _domain_error(_request: Request, exc: CarConnectError) -> JSONResponse:
        return JSONResponse(
            status_code=_status_for(exc),
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    def _session(authorization: Optional[str] = Header(default=None)) -> Optional[dict[str, Any]]:
        if not authorization or not authorization.lower().startswith("bearer "):
            return None
        return sessions.get(authorization.split(" ", 1)[1])

    def require_operator(session=Depends(_session)) -> dict[str, Any]:
        if session is None:
            raise HTTPException(status_code=401, detail="session required")
        if session["role"] != "operator":
            raise HTTPException(status_code=403, detail="operator session required")
        return session

    def require_any(session=Depends(_session)) -> dict[str, Any]:
        if session is None:
            raise HTTPException(status_code=401, detail="session required")
        return session

    def _authorize_vin(session: dict[str, Any], vin: str, driver_step: bool = False) -> None:
        if session["role"] == "driver":
            if session.get("vin") != vin:
                raise HTTPException(status_code=403, detail="drivers may act on their own vehicle only")
            return
        if driver_step:
            raise HTTPException(status_code=403, detail="this step must be completed by the driver")

    # -- sessions ---------------------------------------------------------------

    @app.post("/sessions")
    def create_session(payload: dict) -> dict:
        role = payload.get("role")
        if role != "operator":
            raise HTTPException(status_code=400, detail="only operator sessions are created here")
        return sessions.create("operator", payload.get("operator_id", "operator"))

    @app.post("/sessions/from-link")
    def session_from_link(payload: dict) -> dict:
        from .consent import verify_link_token

        with lock:
            vin = verify_link_token(
                scenario.consents.link_secret, payload["link_token"], scenario.clock.now()
            )
            record = scenario.consents.record(vin)
            if record is None:
                raise HTTPException(status_code=404, detail="no consent for this link")
            return sessions.create("driver", record.driver_email, vin.value)

    # -- catalog ------------------------------------------------------------------

    @app.get("/profiles")
    def list_profiles(_session=Depends(require_any)) -> list[dict]:
        return [profile.to_json_dict() for profile in scenario.registry]

    @app.get("/profiles/{brand}")
    def get_profile(brand: str, _session=Depends(require_any)) -> dict:
        return scenario.registry.profile_for(brand).to_json_dict()

    @app.get("/vehicles")
    def list_vehicles(_session=Depends(require_operator)) -> list[dict]:
        with lock:
            return [vehicle.to_json_dict() for vehicle in scenario.statics.vehicles()]

    @app.get("/vehicles/{vin}")
    def get_vehicle(vin: str, session=Depends(require_any)) -> dict:
        _authorize_vin(session, vin)
        with lock:
            vehicle = scenario.statics.get_vehicle(parse_vin(vin))
            if vehicle is None:
                raise HTTPException(status_code=404, detail="unknown vehicle")
            return vehicle.to_json_dict()

    # -- eligibility ---------------------------------------------------------------

    @app.get("/eligibility")
    def list_outcomes(_session=Depends(require_operator)) -> list[dict]:
        with lock:
            return scenario.statics.outcomes()

    @app.post("/eligibility/{vin}/check")
    def run_eligibility(vin: str, _session=Depends(require_operator)) -> dict:
        with lock:
            vehicle = scenario.statics.get_vehicle(parse_vin(vin))
            if vehicle is None:
                raise HTTPException(status_code=404, detail="unknown vehicle")
            scenario.ensure_eligible(vehicle)
            outcome = scenario.statics.get_outcome(vehicle.vin)
            return outcome or {}

    # -- consents --------------------------------------------------------------------

    def _consent_json(vin_str: str) -> dict:
        record = scenario.consents.record(parse_vin(vin_str))
        if record is None:
            raise HTTPException(status_code=404, detail="no consent for this vehicle")
        scenario.statics.put_consent(record.to_json_dict())
        return record.to_json_dict()

    @app.post("/consents", status_code=201)
    def initiate_consent(payload: dict, session=Depends(require_any)) -> dict:
        vin = parse_vin(payload["vin"])
        _authorize_vin(session, vin.value)
        with lock:
            vehicle = scenario.statics.get_vehicle(vin)
            if vehicle is None:
                raise HTTPException(status_code=404, detail="unknown vehicle")
            profile = scenario.registry.profile_for(vehicle.brand)
            scenario.consents.initiate(vin, payload["driver_email"], profile.consent_variant)
            return _consent_json(vin.value)

    @app.get("/consents")
    def list_consents(_session=Depends(require_operator)) -> list[dict]:
        with lock:
            return [record.to_json_dict() for record in scenario.consents.records()]

    @app.get("/consents/{vin}")
    def get_consent(vin: str, session=Depends(require_any)) -> dict:
        _authorize_vin(session, vin)
        with lock:
            return _consent_json(vin)

    @app.get("/consents/{vin}/mechanism")
    def get_mechanism(vin: str, session=Depends(require_any)) -> dict:
        _authorize_vin(session, vin)
        with lock:
            return {"vin": vin, "privacy_mechanism": scenario.consents.lookup_mechanism(parse_vin(vin)).value}

    @app.post("/consents/{vin}/actions/{action}")
    def consent_action(vin: str, action: str, payload: Optional[dict] = None, session=Depends(require_any)) -> dict:
        payload = payload or {}
        vin_obj = parse_vin(vin)
        driver_steps = {"review", "confirm", "identity", "privacy", "transmission-test", "odometer-report"}
        _authorize_vin(session, vin, driver_step=action in driver_steps)
        with lock:
            consents = scenario.consents
            if action == "review":
                consents.accept_review(vin_obj, payload["link_token"], bool(payload.get("approved", True)))
            elif action == "confirm":
                consents.confirm_on_oem_portal(vin_obj, bool(payload.get("approved", True)))
            elif action == "identity":
                consents.verify_identity(vin_obj, bool(payload.get("passed", True)))
            elif action == "privacy":
                consents.configure_privacy_settings(vin_obj, PrivacyMechanism(payload["mechanism"]))
            elif action == "transmission-test":
                consents.run_transmission_test(vin_obj)
            elif action == "background":
                consents.complete_background_processing(vin_obj)
            elif action == "odometer-report":
                consents.report_odometer(vin_obj, float(payload["km"]))
            elif action == "revoke":
                source = RevokeSource(payload.get("source", "driver_portal"))
                consents.revoke(vin_obj, source)
            else:
                raise HTTPException(status_code=404, detail=f"unknown action {action!r}")
            return _consent_json(vin)

    # -- webhooks -----------------------------------------------------------------------

    @app.post("/webhooks/{brand}")
    async def receive_webhook(brand: str, request: Request) -> Response:
        body = await request.body()
        headers = dict(request.headers)
        with lock:
            record = scenario.platform.receive_webhook(body, headers)
        status = 401 if record.disposition.value == "rejected_bad_signature" else 202
        return JSONResponse(status_code=status, content=record.to_json_dict())

    # -- series / analytics ------------------------------------------------------------

    def _parse_ts(raw: Optional[str]) -> Optional[dt.datetime]:
        return parse_rfc3339(raw) if raw else None

    @app.get("/vehicles/{vin}/series")
    def get_series(
        vin: str,
        kind: str,
        start: Optional[str] = None,
        end: Optional[str] = None,
        downsample_s: Optional[float] = None,
        _session=Depends(require_operator),
    ) -> list[dict]:
        with lock:
            samples = scenario.series.query_series(
                parse_vin(vin), DataPointKind(kind), _parse_ts(start), _parse_ts(end), downsample_s
            )
            return [sample.to_json_dict() for sample in samples]

    @app.get("/vehicles/{vin}/last")
    def get_last(vin: str, kinds: Optional[str] = None, _session=Depends(require_operator)) -> dict:
        wanted = [DataPointKind(k) for k in kinds.split(",")] if kinds else list(DataPointKind)
        with lock:
            latest = scenario.series.last_known(parse_vin(vin), wanted)
            return {kind.value: sample.to_json_dict() for kind, sample in latest.items()}

    @app.get("/vehicles/{vin}/events")
    def get_events(vin: str, start: Optional[str] = None, end: Optional[str] = None, _session=Depends(require_operator)) -> list[dict]:
        with lock:
            events = scenario.series.query_events(parse_vin(vin), start=_parse_ts(start), end=_parse_ts(end))
            return [event.to_json_dict() for event in events]

    @app.get("/vehicles/{vin}/trips")
    def get_trips(vin: str, start: Optional[str] = None, end: Optional[str] = None, _session=Depends(require_operator)) -> list[dict]:
        from .fixtures import speed_limit_map

        with lock:
            trips = segment_trips(parse_vin(vin), scenario.series, _parse_ts(start), _parse_ts(end), speed_limit_map())
            return [trip.to_json_dict() for trip in trips]

    @app.get("/vehicles/{vin}/trips/{index}/track")
    def get_trip_track(vin: str, index: int, _session=Depends(require_operator)) -> dict:
        import math

        from .analytics import estimate_speeds, segment_tracks, track_from_series

        with lock:
            samples = scenario.series.query_series(parse_vin(vin), DataPointKind.GPS_COORDINATES)
            tracks = segment_tracks(track_from_series(samples))
            if not 0 <= index < len(tracks):
                raise HTTPException(status_code=404, detail="no such trip")
            track = tracks[index]
            segments = estimate_speeds(track)
            speeds = [segments[min(i, len(segments) - 1)].speed_kmh if segments else 0.0 for i in range(len(track))]
            headings = []
            for i in range(len(track)):
                a = track[min(i, len(track) - 2)]
                b = track[min(i + 1, len(track) - 1)]
                dlat = b.lat - a.lat
                dlon = (b.lon - a.lon) * math.cos(math.radians(a.lat))
                headings.append(math.degrees(math.atan2(dlon, dlat)) % 360.0 if (dlat or dlon) else 0.0)
            return {
                "vin": vin,
                "index": index,
                "points": [
                    {
                        "ts": rfc3339(p.ts),
                        "lat": p.lat,
                        "lon": p.lon,
                        "speed_kmh": round(speeds[i], 2),
                        "heading_deg": round(headings[i], 1),
                    }
                    for i, p in enumerate(track)
                ],
            }

    @app.get("/map/roads")
    def get_map_roads(_session=Depends(require_any)) -> list[dict]:
        """Bundled speed-limit geometry; the console's map underlay."""
        from .fixtures import speed_limit_map

        return [
            {
                "limit_kmh": segment.limit_kmh,
                "road_class": segment.road_class.value,
                "points": [{"lat": p.lat, "lon": p.lon} for p in segment.points],
            }
            for segment in speed_limit_map().segments
        ]

    @app.get("/vehicles/{vin}/risk")
    def get_risk(vin: str, start: Optional[str] = None, end: Optional[str] = None, _session=Depends(require_operator)) -> dict:
        from .fixtures import speed_limit_map

        with lock:
            period_start = _parse_ts(start) or scenario.start
            period_end = _parse_ts(end) or scenario.clock.now()
            vector = build_risk_features(parse_vin(vin), scenario.series, period_start, period_end, speed_limit_map())
            return vector.to_json_dict()

    @app.get("/vehicles/{vin}/theft-report")
    def get_theft(vin: str, _session=Depends(require_operator)) -> dict:
        with lock:
            return theft_report(parse_vin(vin), scenario.series).to_json_dict()

    @app.get("/reports/cost")
    def get_cost(data_cost: float, premium: float, _session=Depends(require_any)) -> dict:
        return cost_viability(data_cost, premium).to_json_dict()

    @app.get("/metrics")
    def get_metrics() -> PlainTextResponse:
        with lock:
            return PlainTextResponse(scenario.platform.metrics.render_text())

    # -- aggregator (simulated OEM clouds) -----------------------------------------------

    @app.post("/aggregator/oauth/token")
    def oauth_token(payload: dict) -> dict:
        with lock:
            grant = scenario.sim.token_exchange(
                grant_code=payload.get("grant_code"), refresh_token=payload.get("refresh_token")
            )
            return grant.to_json_dict()

    @app.get("/aggregator/vehicles/{vin}/data")
    def aggregator_data(vin: str, kinds: str, authorization: Optional[str] = Header(default=None)) -> list[dict]:
        if not authorization or not authorization.lower().startswith("bearer "):
            raise HTTPException(status_code=401, detail="bearer token required")
        token = authorization.split(" ", 1)[1]
        wanted = [DataPointKind(k) for k in kinds.split(",") if k]
        with lock:
            samples = scenario.sim.fetch_data(parse_vin(vin), wanted, token)
            return [sample.to_json_dict() for sample in samples]

    # -- simulation control ----------------------------------------------------------------

    @app.get("/sim/clock")
    def sim_clock() -> dict:
        with lock:
            return {"now": rfc3339(scenario.clock.now())}

    @app.post("/sim/advance")
    def sim_advance(payload: dict, _session=Depends(require_operator)) -> dict:
        seconds = float(payload.get("seconds", 0)) + float(payload.get("days", 0)) * 86400.0
        if seconds <= 0:
            raise HTTPException(status_code=400, detail="advance needs positive seconds or days")
        with lock:
            fired = scenario.engine.run_for(seconds)
            scenario.persist_all_consents()
            return {"now": rfc3339(scenario.clock.now()), "events_fired": fired}

    @app.post("/sim/scenario")
    def sim_scenario(payload: dict, _session=Depends(require_operator)) -> dict:
        """Swap a vehicle's fault plan mid-run (day offsets are relative to now)."""
        from dataclasses import replace as dc_replace

        from .scenario import materialize_fault_plan

        vin = parse_vin(payload["vin"])
        with lock:
            state = scenario.sim.state_for(vin)
            plan = materialize_fault_plan(payload.get("fault_plan", {}), scenario.clock.now())
            state.config = dc_replace(state.config, fault_plan=plan)
            return {"vin": vin.value, "fault_plan": plan.to_json_dict()}

    # -- console static files ----------------------------------------------------------------

    console_path = Path(console_dir) if console_dir else None
    if console_path and console_path.exists():
        app.mount("/console", StaticFiles(directory=console_path, html=True), name="console")

    return app
