import datetime as dt

import pytest

from carconnect.domain import GpsPoint, UTC, parse_vin
from carconnect.scenario import DEFAULT_START, Scenario, sim_config_from_entry
from carconnect.fixtures import reference_fleet, sim_fleet_entry

TEST_VIN = parse_vin("WBA00000000000301")  # the simulated 116d
MERC_VIN = parse_vin("WDD00000000000501")  # the simulated GLA
HOME = GpsPoint(49.6116, 6.1319)


def make_scenario(seed: int = 42, register_fleet: bool = True, **kwargs) -> Scenario:
    scenario = Scenario(seed=seed, **kwargs)
    if register_fleet:
        for entry in reference_fleet("paper19"):
            scenario.register_vehicle(entry.vehicle, entry.driver_email)
    return scenario


def scenario_with_vehicle(label: str, days: int, seed: int = 42, fault_free: bool = False, **kwargs):
    """Scenario with one simulated vehicle enrolled via the simple flow."""
    entry = dict(sim_fleet_entry(label))
    if fault_free:
        entry["fault_plan"] = {}
    scenario = make_scenario(seed=seed, **kwargs)
    config = sim_config_from_entry(entry, scenario.start)
    scenario.add_sim_vehicle(config, days)
    scenario.enroll_simple(config.vin, "driver@example.lu")
    return scenario, config


@pytest.fixture
def scenario() -> Scenario:
    return make_scenario()
