"""Launch the platform HTTP API on a prepared simulated world.

Used by the console's live end-to-end tests: one enrolled, densely
collected vehicle for the dashboard, one active long-flow consent for the
countdown, and one unenrolled vehicle for the wizard run.
"""

import sys

import uvicorn

from carconnect.fixtures import sim_fleet_entry
from carconnect.http_api import create_app
from carconnect.scenario import build_reference_scenario, sim_config_from_entry

port = int(sys.argv[1]) if len(sys.argv) > 1 else 8123

scenario = build_reference_scenario(
    seed=2024, horizon_days=20, labels=["bmw-116d", "peugeot-3008"], cadence="dense"
)
scenario.run_until_offset(10)
# the X5 exists in the simulator but has no consent yet: the wizard test
# enrolls it, so it must already have passed screening
x5 = sim_config_from_entry(dict(sim_fleet_entry("bmw-x5"), fault_plan={}), scenario.start)
scenario.add_sim_vehicle(x5, 20)
scenario.ensure_eligible(scenario.statics.get_vehicle(x5.vin))

uvicorn.run(create_app(scenario), host="127.0.0.1", port=port, log_level="error")
