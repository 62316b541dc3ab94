"""A 63-day collection run over the simulated fleet.

Shows the two collection strategies working side by side: odometer-only
brands are polled at 05:00 and 22:00 vehicle-local time, everyone else is
collected by reacting to location-change webhooks. The shipped fault
plans reproduce realistic outage gaps for the two Mercedes cars.
"""

from carconnect.scenario import build_reference_scenario

DAYS = 63

scenario = build_reference_scenario(seed=42, horizon_days=DAYS + 10)
scenario.run_until_offset(DAYS)

print(f"after {DAYS} simulated days:\n")
print(f"{'vehicle':<20}{'samples':>9}{'events':>8}")
for vin in scenario.series.vins():
    vehicle = scenario.statics.get_vehicle(vin)
    label = f"{vehicle.brand} {vehicle.model}" if vehicle else vin
    print(f"{label:<20}{scenario.series.sample_count(vin):>9}{scenario.series.event_count(vin):>8}")

print("\nplatform counters:")
for name, value in sorted(scenario.platform.metrics.counters.items()):
    print(f"  {name} = {value}")

print("\nwebhook dispositions seen:")
from collections import Counter

dispositions = Counter(record.disposition.value for record in scenario.platform.delivery_log)
for name, count in dispositions.most_common():
    print(f"  {name} = {count}")
