import datetime as dt
import hashlib
import hmac

import pytest
from fastapi.testclient import TestClient

from carconnect.consent import ConsentState
from carconnect.domain import DataPointKind, NotificationEvent, NotificationKind, UTC, canonical_json
from carconnect.http_api import create_app
from carconnect.simulator import BRAND_HEADER, DELIVERY_ID_HEADER, SIGNATURE_HEADER
from carconnect.fixtures import sim_fleet_entry
from carconnect.scenario import sim_config_from_entry
from conftest import make_scenario, scenario_with_vehicle


@pytest.fixture
def world():
    scenario, config = scenario_with_vehicle("bmw-116d", days=5, fault_free=True)
    client = TestClient(create_app(scenario))
    token = client.post("/sessions", json={"role": "operator", "operator_id": "t"}).json()["token"]
    return scenario, config, client, {"Authorization": f"Bearer {token}"}


class TestSessions:
    def test_routes_require_session(self, world):
        _, _, client, _ = world
        assert client.get("/vehicles").status_code == 401

    def test_driver_sessions_come_from_links(self):
        scenario = make_scenario()
        entry = sim_config_from_entry(sim_fleet_entry("bmw-116d"), scenario.start)
        scenario.add_sim_vehicle(entry, 3)
        from carconnect.domain import ConsentVariant

        record = scenario.consents.initiate(entry.vin, "d@example.lu", ConsentVariant.SIMPLE_PORTAL)
        client = TestClient(create_app(scenario))
        session = client.post("/sessions/from-link", json={"link_token": record.link_token}).json()
        assert session["role"] == "driver"
        assert session["vin"] == entry.vin.value
        # the driver can read their consent but not list everyone's
        headers = {"Authorization": f"Bearer {session['token']}"}
        assert client.get(f"/consents/{entry.vin.value}", headers=headers).status_code == 200
        assert client.get("/consents", headers=headers).status_code == 403

    def test_operator_cannot_do_driver_steps(self, world):
        scenario, config, client, op_headers = world
        response = client.post(
            f"/consents/{config.vin.value}/actions/identity", json={"passed": True}, headers=op_headers
        )
        assert response.status_code == 403


class TestConsentEndpoints:
    def test_full_simple_flow_over_http(self):
        scenario = make_scenario()
        entry = sim_config_from_entry(sim_fleet_entry("bmw-116d"), scenario.start)
        scenario.add_sim_vehicle(entry, 3)
        client = TestClient(create_app(scenario))
        operator = client.post("/sessions", json={"role": "operator"}).json()["token"]
        op = {"Authorization": f"Bearer {operator}"}
        created = client.post(
            "/consents", json={"vin": entry.vin.value, "driver_email": "d@example.lu"}, headers=op
        )
        assert created.status_code == 201
        link = created.json()["link_token"]
        driver = client.post("/sessions/from-link", json={"link_token": link}).json()["token"]
        dr = {"Authorization": f"Bearer {driver}"}
        reviewed = client.post(
            f"/consents/{entry.vin.value}/actions/review", json={"link_token": link, "approved": True}, headers=dr
        )
        assert reviewed.json()["state"] == "awaiting_oem_confirmation"
        confirmed = client.post(
            f"/consents/{entry.vin.value}/actions/confirm", json={"approved": True}, headers=dr
        )
        assert confirmed.json()["state"] == "active"
        revoked = client.post(f"/consents/{entry.vin.value}/actions/revoke", json={}, headers=dr)
        assert revoked.json()["state"] == "revoked"

    def test_wrong_state_maps_to_409(self, world):
        scenario, config, client, op = world
        response = client.post(
            f"/consents/{config.vin.value}/actions/odometer-report", json={"km": 1.0},
            headers=op,
        )
        # operator cannot perform the driver step at all
        assert response.status_code == 403

    def test_unknown_vehicle_404(self, world):
        _, _, client, op = world
        response = client.post(
            "/consents", json={"vin": "ZZZ00000000009999", "driver_email": "x@y.lu"}, headers=op
        )
        assert response.status_code == 404


class TestWebhookEndpoint:
    def test_signed_delivery_accepted(self, world):
        scenario, config, client, _ = world
        event = NotificationEvent(
            vin=config.vin, kind=NotificationKind.BATTERY_WARNING,
            emitted_at=scenario.clock.now(), delivery_id="http-1",
        )
        body = canonical_json(event.to_json_dict()).encode()
        signature = hmac.new(b"oem-secret-bmw", body, hashlib.sha256).hexdigest()
        response = client.post(
            "/webhooks/bmw",
            content=body,
            headers={DELIVERY_ID_HEADER: "http-1", BRAND_HEADER: "bmw", SIGNATURE_HEADER: signature},
        )
        assert response.status_code == 202
        assert response.json()["disposition"] == "stored"

    def test_bad_signature_401(self, world):
        scenario, config, client, _ = world
        event = NotificationEvent(
            vin=config.vin, kind=NotificationKind.BATTERY_WARNING,
            emitted_at=scenario.clock.now(), delivery_id="http-2",
        )
        body = canonical_json(event.to_json_dict()).encode()
        response = client.post(
            "/webhooks/bmw",
            content=body,
            headers={DELIVERY_ID_HEADER: "http-2", BRAND_HEADER: "bmw", SIGNATURE_HEADER: "00" * 32},
        )
        assert response.status_code == 401


class TestSeriesAndReports:
    def test_series_query_with_downsample(self, world):
        scenario, config, client, op = world
        scenario.run_days(3)
        response = client.get(
            f"/vehicles/{config.vin.value}/series",
            params={"kind": "odometer", "downsample_s": 86400},
            headers=op,
        )
        assert response.status_code == 200
        points = response.json()
        assert points == sorted(points, key=lambda p: p["observed_at"])

    def test_trips_and_track(self):
        scenario, config = scenario_with_vehicle(
            "bmw-116d", days=4, fault_free=True, policies=None
        )
        from carconnect.ingestion import dense_policies

        scenario.platform.policies.update(dense_policies(scenario.registry))
        scenario.run_days(3)
        client = TestClient(create_app(scenario))
        token = client.post("/sessions", json={"role": "operator"}).json()["token"]
        op = {"Authorization": f"Bearer {token}"}
        trips = client.get(f"/vehicles/{config.vin.value}/trips", headers=op).json()
        assert trips, "dense cadence over 3 days must produce trips"
        track = client.get(f"/vehicles/{config.vin.value}/trips/0/track", headers=op).json()
        assert len(track["points"]) >= 2
        assert {"ts", "lat", "lon", "speed_kmh"} <= set(track["points"][0])

    def test_cost_report(self, world):
        _, _, client, op = world
        payload = client.get("/reports/cost", params={"data_cost": 6.5, "premium": 81.25}, headers=op).json()
        assert payload["ratio"] == pytest.approx(0.08)

    def test_metrics_text(self, world):
        scenario, _, client, _ = world
        scenario.run_days(1)
        text = client.get("/metrics").text
        assert any(line.startswith("samples_stored ") for line in text.splitlines())


class TestAggregator:
    def test_oauth_and_data_fetch_over_http(self, world):
        scenario, config, client, op = world
        code = scenario.sim.issue_auth_code(config.vin)
        grant = client.post("/aggregator/oauth/token", json={"grant_code": code}).json()
        assert grant["token_type"] == "bearer"
        response = client.get(
            f"/aggregator/vehicles/{config.vin.value}/data",
            params={"kinds": "odometer,fuel_volume"},
            headers={"Authorization": f"Bearer {grant['access_token']}"},
        )
        assert response.status_code == 200
        assert {s["kind"] for s in response.json()} == {"odometer", "fuel_volume"}

    def test_reused_refresh_token_400(self, world):
        scenario, config, client, _ = world
        code = scenario.sim.issue_auth_code(config.vin)
        grant = client.post("/aggregator/oauth/token", json={"grant_code": code}).json()
        first = client.post("/aggregator/oauth/token", json={"refresh_token": grant["refresh_token"]})
        assert first.status_code == 200
        second = client.post("/aggregator/oauth/token", json={"refresh_token": grant["refresh_token"]})
        assert second.status_code == 400


class TestSimControl:
    def test_advance_runs_the_engine(self, world):
        scenario, config, client, op = world
        before = scenario.series.sample_count(config.vin.value)
        response = client.post("/sim/advance", json={"days": 2}, headers=op)
        assert response.status_code == 200
        assert scenario.series.sample_count(config.vin.value) > before

    def test_scenario_applies_fault_plan(self, world):
        scenario, config, client, op = world
        response = client.post(
            "/sim/scenario",
            json={"vin": config.vin.value, "fault_plan": {"api_outages_days": [[0.0, 1.0]]}},
            headers=op,
        )
        assert response.status_code == 200
        assert scenario.sim.state_for(config.vin).config.fault_plan.api_down(scenario.clock.now())
