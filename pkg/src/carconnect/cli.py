"""Operator command line.

Thin adapter over the library: every subcommand builds the same objects a
script would and prints either human-readable text or, with --json,
the exact structures the module operations return.

Workspace state lives under --data-dir (or $UBI_DATA_DIR): file-backed
stores plus a small state file recording seed, start and current
simulated time, so consent walkthroughs and reports can span commands.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Optional

from .analytics import build_risk_features, cost_viability, segment_trips, theft_report
from .consent import ConsentService, ConsentState, PrivacyMechanism, RevokeSource
from .domain import CarConnectError, ConsentVariant, UTC, parse_rfc3339, parse_vin, rfc3339
from .eligibility import EligibilityService, VinCheckState
from .scenario import DEFAULT_START, Scenario, build_reference_scenario, sim_config_from_entry
from .storage import FileSeriesStore, FileStaticStore
from .timebase import EventEngine, SimClock

DEFAULT_DATA_DIR = "carconnect-data"


def _data_dir(args: argparse.Namespace) -> Path:
    return Path(args.data_dir or os.environ.get("UBI_DATA_DIR") or DEFAULT_DATA_DIR)


def _state_path(root: Path) -> Path:
    return root / "state.json"


def _load_state(root: Path) -> dict[str, Any]:
    path = _state_path(root)
    if not path.exists():
        raise CarConnectError(f"no workspace at {root}; run `collect run` or `consent initiate` first")
    return json.loads(path.read_text(encoding="utf-8"))


def _save_state(root: Path, state: dict[str, Any]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    _state_path(root).write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(args: argparse.Namespace, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


# ---------------------------------------------------------------------------
# eligibility
# ---------------------------------------------------------------------------


def _eligibility_scenario(fixture: str) -> tuple[Scenario, list]:
    from .fixtures import reference_fleet, reference_registry, reference_rules, reference_vin_table

    scenario = Scenario(
        registry=reference_registry(),
        rules=reference_rules(),
        vin_table=reference_vin_table(),
    )
    fleet = reference_fleet(fixture)
    for entry in fleet:
        scenario.register_vehicle(entry.vehicle, entry.driver_email)
    return scenario, fleet


def cmd_eligibility_check(args: argparse.Namespace) -> int:
    scenario, fleet = _eligibility_scenario(args.fixture)
    vin = parse_vin(args.vin)
    entry = next((e for e in fleet if e.vehicle.vin == vin), None)
    if entry is None:
        raise CarConnectError(f"VIN {vin} is not part of fixture {args.fixture!r}")
    scenario.ensure_eligible(entry.vehicle)
    outcome = scenario.eligibility.outcome(vin)
    payload = outcome.to_json_dict()
    _emit(
        args,
        payload,
        f"{vin}: requirements {'ok' if outcome.requirement_ok else 'FAILED'}, "
        f"VIN check {outcome.vin_check.value}",
    )
    return 0


def cmd_eligibility_report(args: argparse.Namespace) -> int:
    from .fixtures import display_names

    scenario, fleet = _eligibility_scenario(args.fixture)
    for entry in fleet:
        scenario.ensure_eligible(entry.vehicle)
    table = scenario.eligibility.report((e.vehicle for e in fleet), display_names())
    payload = {brand: {"requirements_passed": req, "vin_check_passed": ok} for brand, (req, ok) in table.items()}
    lines = [f"{'OEM':<14} {'requirements':>12} {'vin check':>10}"]
    for brand, (req, ok) in table.items():
        lines.append(f"{brand:<14} {req:>12} {ok:>10}")
    _emit(args, payload, "\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# collect
# ---------------------------------------------------------------------------


def cmd_collect_run(args: argparse.Namespace) -> int:
    root = _data_dir(args)
    if root.exists() and not args.keep:
        shutil.rmtree(root)
    start = parse_rfc3339(args.start) if args.start else DEFAULT_START
    labels = args.labels.split(",") if args.labels else None
    scenario = build_reference_scenario(
        seed=args.seed,
        start=start,
        data_dir=root,
        labels=labels,
        horizon_days=args.days + 10,
        cadence=args.cadence,
    )
    scenario.run_until_offset(args.days)
    _save_state(
        root,
        {
            "seed": args.seed,
            "start": rfc3339(scenario.start),
            "now": rfc3339(scenario.clock.now()),
            "days": args.days,
            "labels": labels,
            "cadence": args.cadence,
        },
    )
    summary = {
        "days": args.days,
        "seed": args.seed,
        "now": rfc3339(scenario.clock.now()),
        "vehicles": {
            vin: {
                "samples": scenario.series.sample_count(vin),
                "events": scenario.series.event_count(vin),
            }
            for vin in scenario.series.vins()
        },
        "metrics": dict(sorted(scenario.platform.metrics.counters.items())),
    }
    text_lines = [f"collected {args.days} simulated days (seed {args.seed})"]
    for vin, counts in summary["vehicles"].items():
        text_lines.append(f"  {vin}: {counts['samples']} samples, {counts['events']} events")
    _emit(args, summary, "\n".join(text_lines))
    return 0


# ---------------------------------------------------------------------------
# consent walkthrough
# ---------------------------------------------------------------------------


def _consent_world(root: Path) -> tuple[dict[str, Any], ConsentService, FileStaticStore, SimClock]:
    from .fixtures import reference_registry, sim_fleet_entries

    state = (
        _load_state(root)
        if _state_path(root).exists()
        else {"seed": 42, "start": rfc3339(DEFAULT_START), "now": rfc3339(DEFAULT_START)}
    )
    registry = reference_registry()
    statics = FileStaticStore(root / "static.jsonl", registry)
    clock = SimClock(parse_rfc3339(state["now"]))
    engine = EventEngine(clock)

    from .scenario import derive_seed
    from .simulator import VehicleSimState, generate_trace

    sim_states: dict[str, VehicleSimState] = {}

    def _sim_state(vin):
        if vin.value not in sim_states:
            for entry in sim_fleet_entries():
                if entry["vin"] == vin.value:
                    config = sim_config_from_entry(entry, parse_rfc3339(state["start"]))
                    start_day = parse_rfc3339(state["start"]).astimezone(config.tz()).date()
                    trips = generate_trace(config, start_day, 40, derive_seed(state["seed"], vin.value))
                    sim_states[vin.value] = VehicleSimState(config, trips)
                    break
            else:
                raise CarConnectError(f"{vin} has no simulated twin; consent steps need one")
        return sim_states[vin.value]

    consents = ConsentService(
        engine,
        eligibility_gate=lambda vin: True,
        mechanism_lookup=lambda vin: _sim_state(vin).config.privacy_mechanism,
        transmission_ok=lambda vin: not _sim_state(vin).config.fault_plan.transmission_test_fails,
        trips_since=lambda vin, since: _sim_state(vin).trips_between(since, clock.now()),
    )
    for record_payload in statics.consents():
        from .consent import ConsentRecord

        record = ConsentRecord.from_json_dict(record_payload)
        consents._records[record.vin.value] = record
    return state, consents, statics, clock


def _persist_consent_world(root: Path, state: dict[str, Any], consents: ConsentService, statics: FileStaticStore, clock: SimClock) -> None:
    for record in consents.records():
        statics.put_consent(record.to_json_dict())
    state["now"] = rfc3339(clock.now())
    _save_state(root, state)


def cmd_consent(args: argparse.Namespace) -> int:
    from .fixtures import reference_fleet, reference_registry

    root = _data_dir(args)
    root.mkdir(parents=True, exist_ok=True)
    state, consents, statics, clock = _consent_world(root)
    vin = parse_vin(args.vin)
    if statics.get_vehicle(vin) is None:
        for entry in reference_fleet("paper19+offyear"):
            statics.put_vehicle(entry.vehicle)
    if args.consent_cmd == "initiate":
        registry = reference_registry()
        vehicle = statics.get_vehicle(vin)
        if vehicle is None:
            raise CarConnectError(f"unknown vehicle {vin}")
        variant = registry.profile_for(vehicle.brand).consent_variant
        record = consents.initiate(vin, args.email, variant)
        text = f"{vin}: consent {record.state.value}; link token issued (see --json for the token)"
    elif args.consent_cmd == "step":
        record = consents.record(vin)
        if record is None:
            raise CarConnectError(f"no consent for {vin}; run `consent initiate` first")
        action = args.action
        if action == "review":
            record = consents.accept_review(vin, record.link_token, approved=not args.decline)
        elif action == "confirm":
            record = consents.confirm_on_oem_portal(vin, approved=not args.decline)
        elif action == "identity":
            record = consents.verify_identity(vin, passed=not args.decline)
        elif action == "privacy":
            mechanism = PrivacyMechanism(args.mechanism) if args.mechanism else consents.lookup_mechanism(vin)
            record = consents.configure_privacy_settings(vin, mechanism)
        elif action == "transmission-test":
            record = consents.run_transmission_test(vin)
        elif action == "wait":
            clock.advance(args.days * 86400.0)
            record = consents.record(vin)
        elif action == "background":
            record = consents.complete_background_processing(vin)
        elif action == "odometer-report":
            if args.km is None:
                raise CarConnectError("odometer-report needs --km")
            record = consents.report_odometer(vin, args.km)
        else:
            raise CarConnectError(f"unknown consent step {action!r}")
        text = f"{vin}: consent now {record.state.value}"
    elif args.consent_cmd == "revoke":
        record = consents.revoke(vin, RevokeSource.DRIVER_PORTAL)
        text = f"{vin}: consent revoked"
    elif args.consent_cmd == "show":
        record = consents.record(vin)
        if record is None:
            raise CarConnectError(f"no consent for {vin}")
        text = f"{vin}: {record.state.value} (variant {record.variant.value})"
    else:  # pragma: no cover - argparse guards
        raise CarConnectError("unknown consent command")
    _persist_consent_world(root, state, consents, statics, clock)
    _emit(args, record.to_json_dict(), text)
    return 0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _open_series(root: Path) -> FileSeriesStore:
    if not (root / "series").exists():
        raise CarConnectError(f"no collected data under {root}; run `collect run` first")
    return FileSeriesStore(root / "series")


def cmd_report(args: argparse.Namespace) -> int:
    if args.report_cmd == "cost":
        verdict = cost_viability(args.data_cost, args.premium)
        _emit(
            args,
            verdict.to_json_dict(),
            f"data cost {verdict.data_cost_eur_month:.2f} EUR / premium {verdict.premium_eur_month:.2f} EUR "
            f"= {verdict.ratio:.3f} ({verdict.verdict})",
        )
        return 0
    from .fixtures import speed_limit_map

    root = _data_dir(args)
    series = _open_series(root)
    vin = parse_vin(args.vin)
    if args.report_cmd == "trips":
        trips = segment_trips(vin, series, speed_map=speed_limit_map())
        payload = {"schema_version": 1, "vin": vin.value, "trips": [t.to_json_dict() for t in trips]}
        lines = [f"{len(trips)} trips for {vin}"]
        for t in trips:
            lines.append(
                f"  {t.start:%Y-%m-%d %H:%M} {t.distance_km:6.2f} km  night {t.night_km:5.2f} km  "
                f"max {t.max_speed_kmh:5.1f} km/h  brakes {t.harsh_brake_count}"
            )
        if args.csv:
            _write_trips_csv(Path(args.csv), trips)
            lines.append(f"trip table written to {args.csv}")
        _emit(args, payload, "\n".join(lines))
    elif args.report_cmd == "risk":
        state = _load_state(root)
        vector = build_risk_features(
            vin, series, parse_rfc3339(state["start"]), parse_rfc3339(state["now"]), speed_limit_map()
        )
        payload = {"schema_version": 1, **vector.to_json_dict()}
        _emit(
            args,
            payload,
            f"{vin}: {vector.total_km:.1f} km, night {vector.night_fraction:.1%}, "
            f"overspeed {vector.overspeed_fraction:.1%}, "
            f"harsh brakes {vector.harsh_brakes_per_100km:.2f}/100km, "
            f"accidents {vector.accident_count}",
        )
    elif args.report_cmd == "theft":
        report = theft_report(vin, series)
        payload = {"schema_version": 1, **report.to_json_dict()}
        lock_text = {True: "locked", False: "unlocked", None: "unknown"}[report.last_lock_state]
        _emit(
            args,
            payload,
            f"{vin}: doors {lock_text}, last seen {rfc3339(report.last_seen_at)}, "
            f"last trajectory has {len(report.last_trajectory)} points",
        )
    else:  # pragma: no cover
        raise CarConnectError("unknown report")
    return 0


def _write_trips_csv(path: Path, trips) -> None:
    import csv

    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["schema_version", "vin", "start", "end", "distance_km", "night_km", "max_speed_kmh",
             "mean_speed_kmh", "harsh_brake_count", "overspeed_km", "point_count"]
        )
        for t in trips:
            writer.writerow(
                [1, t.vin, rfc3339(t.start), rfc3339(t.end), f"{t.distance_km:.4f}", f"{t.night_km:.4f}",
                 f"{t.max_speed_kmh:.2f}", f"{t.mean_speed_kmh:.2f}", t.harsh_brake_count,
                 f"{t.overspeed_km:.4f}", t.point_count]
            )


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------


def cmd_export(args: argparse.Namespace) -> int:
    root = _data_dir(args)
    series = _open_series(root)
    statics = FileStaticStore(root / "static.jsonl")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "static.jsonl").write_text("\n".join(statics.export_lines()) + "\n", encoding="utf-8")
    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    count = 0
    for vin in series.vins():
        lines = series.export_vin_lines(vin)
        (series_dir / f"{vin}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        count += len(lines)
    _emit(args, {"rows": count, "out": str(out)}, f"exported {count} rows to {out}")
    return 0


def cmd_import(args: argparse.Namespace) -> int:
    root = _data_dir(args)
    root.mkdir(parents=True, exist_ok=True)
    series = FileSeriesStore(root / "series")
    statics = FileStaticStore(root / "static.jsonl")
    src = Path(args.src)
    total = 0
    static_file = src / "static.jsonl"
    if static_file.exists():
        total += statics.import_lines(static_file.read_text(encoding="utf-8").splitlines())
    for path in sorted((src / "series").glob("*.jsonl")):
        written, events = series.import_lines(path.read_text(encoding="utf-8").splitlines())
        total += written + events
    if not _state_path(root).exists():
        _save_state(root, {"seed": 0, "start": rfc3339(DEFAULT_START), "now": rfc3339(DEFAULT_START)})
    _emit(args, {"rows": total}, f"imported {total} rows into {root}")
    return 0


# ---------------------------------------------------------------------------
# sim
# ---------------------------------------------------------------------------


def cmd_sim(args: argparse.Namespace) -> int:
    if args.sim_cmd == "start":
        import uvicorn

        from .http_api import create_app

        scenario = build_reference_scenario(seed=args.seed, horizon_days=args.horizon_days)
        console = Path(args.console_dir) if args.console_dir else Path("frontend/dist")
        app = create_app(scenario, console_dir=console if console.exists() else None)
        if args.autoplay > 0:
            import threading
            import time as _time

            def _autoplay() -> None:
                while True:
                    _time.sleep(1.0)
                    with app.state.lock:
                        scenario.engine.run_for(args.autoplay)

            threading.Thread(target=_autoplay, daemon=True).start()
        print(f"simulated world ready (seed {args.seed}); serving on http://{args.host}:{args.port}")
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
        return 0
    import httpx

    base = args.server.rstrip("/")
    client = httpx.Client(base_url=base, timeout=30.0)
    token = client.post("/sessions", json={"role": "operator", "operator_id": "cli"}).json()["token"]
    headers = {"Authorization": f"Bearer {token}"}
    if args.sim_cmd == "advance":
        response = client.post("/sim/advance", json={"seconds": args.seconds, "days": args.days}, headers=headers)
        response.raise_for_status()
        payload = response.json()
        _emit(args, payload, f"clock now {payload['now']} ({payload['events_fired']} events fired)")
        return 0
    if args.sim_cmd == "scenario":
        plan = json.loads(args.fault_plan)
        response = client.post("/sim/scenario", json={"vin": args.vin, "fault_plan": plan}, headers=headers)
        response.raise_for_status()
        _emit(args, response.json(), f"fault plan applied to {args.vin}")
        return 0
    raise CarConnectError("unknown sim command")  # pragma: no cover


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carconnect", description="Connected-car collection platform, desk scale")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--data-dir", help="workspace directory (default $UBI_DATA_DIR or ./carconnect-data)")
    # The same flags are accepted after any subcommand; SUPPRESS keeps the
    # subparser from clobbering a value parsed at the top level.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--data-dir", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    elig = sub.add_parser("eligibility", help="connectability screening")
    elig_sub = elig.add_subparsers(dest="elig_cmd", required=True)
    check = elig_sub.add_parser("check", help="screen one VIN", parents=[common])
    check.add_argument("--vin", required=True)
    check.add_argument("--fixture", default="paper19", help="fleet fixture (paper19, paper19+offyear)")
    check.set_defaults(func=cmd_eligibility_check)
    report = elig_sub.add_parser("report", help="per-brand screening table", parents=[common])
    report.add_argument("--fixture", default="paper19")
    report.set_defaults(func=cmd_eligibility_report)

    collect = sub.add_parser("collect", help="run data collection")
    collect_sub = collect.add_subparsers(dest="collect_cmd", required=True)
    run = collect_sub.add_parser("run", help="simulate N days of collection", parents=[common])
    run.add_argument("--days", type=int, required=True)
    run.add_argument("--seed", type=int, default=42)
    run.add_argument("--labels", help="comma-separated sim vehicle labels (default: all)")
    run.add_argument("--start", help="simulation start (RFC 3339)")
    run.add_argument("--keep", action="store_true", help="append to the existing workspace instead of wiping")
    run.add_argument(
        "--cadence",
        choices=["default", "dense"],
        default="default",
        help="dense requests on every location change (trip-level analytics)",
    )
    run.set_defaults(func=cmd_collect_run)

    consent = sub.add_parser("consent", help="drive consent flows headlessly")
    consent_sub = consent.add_subparsers(dest="consent_cmd", required=True)
    initiate = consent_sub.add_parser("initiate", parents=[common])
    initiate.add_argument("--vin", required=True)
    initiate.add_argument("--email", required=True)
    step = consent_sub.add_parser("step", parents=[common])
    step.add_argument("--vin", required=True)
    step.add_argument(
        "--action",
        required=True,
        choices=["review", "confirm", "identity", "privacy", "transmission-test", "wait", "background", "odometer-report"],
    )
    step.add_argument("--decline", action="store_true", help="fail/decline the step instead of passing it")
    step.add_argument("--mechanism", help="privacy mechanism override")
    step.add_argument("--km", type=float, help="odometer reading for odometer-report")
    step.add_argument("--days", type=float, default=3.0, help="days to wait for the `wait` action")
    revoke = consent_sub.add_parser("revoke", parents=[common])
    revoke.add_argument("--vin", required=True)
    show = consent_sub.add_parser("show", parents=[common])
    show.add_argument("--vin", required=True)
    for sp in (initiate, step, revoke, show):
        sp.set_defaults(func=cmd_consent)

    rep = sub.add_parser("report", help="analytics reports")
    rep_sub = rep.add_subparsers(dest="report_cmd", required=True)
    trips = rep_sub.add_parser("trips", parents=[common])
    trips.add_argument("--vin", required=True)
    trips.add_argument("--csv", help="also write a CSV trip table to this path")
    risk = rep_sub.add_parser("risk", parents=[common])
    risk.add_argument("--vin", required=True)
    theft = rep_sub.add_parser("theft", parents=[common])
    theft.add_argument("--vin", required=True)
    cost = rep_sub.add_parser("cost", parents=[common])
    cost.add_argument("--data-cost", type=float, required=True)
    cost.add_argument("--premium", type=float, required=True)
    for sp in (trips, risk, theft, cost):
        sp.set_defaults(func=cmd_report)

    export = sub.add_parser("export", help="dump stores as JSON-lines", parents=[common])
    export.add_argument("--out", required=True)
    export.set_defaults(func=cmd_export)
    imp = sub.add_parser("import", help="load a JSON-lines dump", parents=[common])
    imp.add_argument("--src", required=True)
    imp.set_defaults(func=cmd_import)

    sim = sub.add_parser("sim", help="simulator control")
    sim_sub = sim.add_subparsers(dest="sim_cmd", required=True)
    start = sim_sub.add_parser("start", help="serve the HTTP API on a fresh world", parents=[common])
    start.add_argument("--host", default="127.0.0.1")
    start.add_argument("--port", type=int, default=8099)
    start.add_argument("--seed", type=int, default=42)
    start.add_argument("--horizon-days", type=int, default=120)
    start.add_argument("--autoplay", type=float, default=0.0, help="simulated seconds advanced per wall second")
    start.add_argument("--console-dir", help="static console build to mount at /console")
    advance = sim_sub.add_parser("advance", help="advance a running server's clock", parents=[common])
    advance.add_argument("--server", default="http://127.0.0.1:8099")
    advance.add_argument("--seconds", type=float, default=0.0)
    advance.add_argument("--days", type=float, default=0.0)
    scen = sim_sub.add_parser("scenario", help="apply a fault plan on a running server", parents=[common])
    scen.add_argument("--server", default="http://127.0.0.1:8099")
    scen.add_argument("--vin", required=True)
    scen.add_argument("--fault-plan", required=True, help="JSON fault plan (day offsets relative to now)")
    for sp in (start, advance, scen):
        sp.set_defaults(func=cmd_sim)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CarConnectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
