"""Eligibility screening walkthrough.

Runs the bundled 21-car fleet (19 reference cars plus two off-year cars)
through the two-step pipeline: declarative requirement rules first, then
the VIN check against the aggregator. Mercedes VINs go through the
simulated manual review, so the clock is advanced a few business days.
"""

from carconnect.fixtures import display_names, reference_fleet
from carconnect.cli import _eligibility_scenario

scenario, fleet = _eligibility_scenario("paper19+offyear")

print(f"screening {len(fleet)} cars...\n")
for entry in fleet:
    scenario.ensure_eligible(entry.vehicle)
    outcome = scenario.eligibility.outcome(entry.vehicle.vin)
    marker = {
        ("yes", "eligible"): "connectable",
        ("yes", "not_eligible"): "failed VIN check",
    }.get(("yes" if outcome.requirement_ok else "no", outcome.vin_check.value), "failed requirements")
    print(f"  {entry.vehicle.vin}  {entry.vehicle.brand:<11} {entry.vehicle.model:<6} "
          f"{entry.vehicle.production_year}  -> {marker}")

# Aggregate per brand: this reproduces the reference screening table.
table = scenario.eligibility.report((e.vehicle for e in fleet), display_names())
print(f"\n{'OEM':<14}{'requirements':>14}{'VIN check':>11}")
for brand, (requirements, vin_ok) in table.items():
    print(f"{brand:<14}{requirements:>14}{vin_ok:>11}")
