"""Trip analytics over densely collected telemetry.

Runs one BMW-like car for a week with the dense cadence (a request on
every location change), then derives everything the insurance side
cares about: trips, distances, the night share, speed and harsh-brake
estimates, overspeed against the bundled speed-limit map, risk features,
and the theft-investigation view. Also renders two PNG charts
(fuel/maintenance evolution, and one trip's trajectory).
"""

import datetime as dt
from pathlib import Path

from carconnect.analytics import build_risk_features, segment_trips, theft_report
from carconnect.domain import DataPointKind
from carconnect.fixtures import reference_fleet, sim_fleet_entry, speed_limit_map
from carconnect.ingestion import dense_policies
from carconnect.scenario import Scenario, sim_config_from_entry

DAYS = 7

scenario = Scenario(seed=21)
scenario.platform.policies.update(dense_policies(scenario.registry))
for entry in reference_fleet("paper19"):
    scenario.register_vehicle(entry.vehicle, entry.driver_email)
config = sim_config_from_entry(dict(sim_fleet_entry("bmw-116d"), fault_plan={}), scenario.start)
scenario.add_sim_vehicle(config, DAYS + 3)
scenario.enroll_simple(config.vin, "driver.116d@example.lu")
scenario.run_days(DAYS)

vin = config.vin
print(f"{scenario.series.sample_count(vin.value)} samples collected in {DAYS} days (dense cadence)\n")

trips = segment_trips(vin, scenario.series, speed_map=speed_limit_map())
print(f"{len(trips)} trips recovered:")
for trip in trips:
    print(
        f"  {trip.start:%a %H:%M}  {trip.distance_km:6.2f} km"
        f"  night {trip.night_km:5.2f} km"
        f"  mean {trip.mean_speed_kmh:5.1f} km/h  max {trip.max_speed_kmh:5.1f} km/h"
        f"  overspeed {trip.overspeed_km:4.2f} km"
    )

vector = build_risk_features(vin, scenario.series, scenario.start, scenario.clock.now(), speed_limit_map())
print("\nrisk features for the period:")
print(f"  total          {vector.total_km:8.1f} km")
print(f"  night share    {vector.night_fraction:8.1%}")
print(f"  urban share    {vector.urban_fraction:8.1%}")
print(f"  overspeed      {vector.overspeed_fraction:8.1%}")
print(f"  harsh brakes   {vector.harsh_brakes_per_100km:8.2f} per 100 km")

report = theft_report(vin, scenario.series)
lock = {True: "locked", False: "unlocked", None: "unknown"}[report.last_lock_state]
print(f"\ntheft view: doors {lock}, last seen {report.last_seen_at:%Y-%m-%d %H:%M}, "
      f"last trajectory has {len(report.last_trajectory)} fixes")

# -- charts -------------------------------------------------------------------

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)
try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:  # plotting is optional
    print("\nmatplotlib not available; skipping charts")
else:
    fuel = scenario.series.query_series(vin, DataPointKind.FUEL_VOLUME)
    maint = scenario.series.query_series(vin, DataPointKind.DISTANCE_TO_NEXT_MAINTENANCE)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    ax1.plot([s.observed_at for s in fuel], [s.value for s in fuel], lw=1)
    ax1.set_ylabel("fuel volume (l)")
    ax2.plot([s.observed_at for s in maint], [s.value for s in maint], lw=1, color="tab:orange")
    ax2.set_ylabel("distance to next maintenance (km)")
    fig.suptitle(f"collected series, {config.vin}")
    fig.autofmt_xdate()
    fig.savefig(out_dir / "series.png", dpi=120)
    print(f"\nwrote {out_dir / 'series.png'}")

    last = report.last_trajectory
    fig2, ax = plt.subplots(figsize=(6, 6))
    ax.plot([p.lon for p in last], [p.lat for p in last], marker=".", ms=3, lw=0.8)
    ax.plot(last[0].lon, last[0].lat, "g^", label="start")
    ax.plot(last[-1].lon, last[-1].lat, "rs", label="end")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title("last trajectory")
    ax.legend()
    fig2.savefig(out_dir / "trajectory.png", dpi=120)
    print(f"wrote {out_dir / 'trajectory.png'}")
