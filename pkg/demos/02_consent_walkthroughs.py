"""Both consent flows, step by step.

The simple portal flow (BMW/Mercedes style) takes two driver actions.
The Stellantis-style flow adds identity verification, in-vehicle privacy
settings, a six-minute transmission test, days of background processing
and a first odometer report; afterwards the quarterly report keeps it
alive, and skipping it expires the consent.
"""

import datetime as dt

from carconnect.domain import ConsentVariant
from carconnect.fixtures import sim_fleet_entry
from carconnect.scenario import Scenario, sim_config_from_entry
from carconnect.fixtures import reference_fleet

scenario = Scenario(seed=7)
for entry in reference_fleet("paper19"):
    scenario.register_vehicle(entry.vehicle, entry.driver_email)

bmw = sim_config_from_entry(dict(sim_fleet_entry("bmw-116d"), fault_plan={}), scenario.start)
stellantis = sim_config_from_entry(dict(sim_fleet_entry("peugeot-3008"), fault_plan={}), scenario.start)
scenario.add_sim_vehicle(bmw, 130)
scenario.add_sim_vehicle(stellantis, 130)

consents = scenario.consents


def show(vin):
    record = consents.record(vin)
    print(f"    state = {record.state.value}")


print("simple portal flow (BMW-like):")
record = consents.initiate(bmw.vin, "driver.116d@example.lu", ConsentVariant.SIMPLE_PORTAL)
print(f"  initiate: email sent with one-time link {record.link_token[:24]}...")
consents.accept_review(bmw.vin, record.link_token, approved=True)
print("  driver reviewed the data points on our portal")
show(bmw.vin)
consents.confirm_on_oem_portal(bmw.vin, approved=True)
print("  driver confirmed on the manufacturer portal; OAuth credentials stored")
show(bmw.vin)

print("\nStellantis-style flow:")
record = consents.initiate(stellantis.vin, "driver.3008@example.lu", ConsentVariant.STELLANTIS_COMPLEX)
print("  initiate: email sent")
consents.accept_review(stellantis.vin, record.link_token, approved=True)
show(stellantis.vin)
consents.verify_identity(stellantis.vin, passed=True)
print("  identity verified on the dedicated website")
show(stellantis.vin)
mechanism = consents.lookup_mechanism(stellantis.vin)
print(f"  the car uses the '{mechanism.value}' privacy mechanism (precomputed from the VIN)")
consents.configure_privacy_settings(stellantis.vin, mechanism)
show(stellantis.vin)
before = scenario.clock.now()
consents.run_transmission_test(stellantis.vin)
print(f"  transmission test ran for {(scenario.clock.now() - before).total_seconds():.0f} simulated seconds")
show(stellantis.vin)
print("  background processing: waiting a few days with the car being driven...")
scenario.engine.run_until(scenario.clock.now() + dt.timedelta(days=4))
consents.complete_background_processing(stellantis.vin)
show(stellantis.vin)
odometer = scenario.sim.state_for(stellantis.vin).odometer_km(scenario.clock.now())
consents.report_odometer(stellantis.vin, round(odometer, 1))
print(f"  driver reported {odometer:.0f} km")
show(stellantis.vin)

print("\nquarterly rule: no report for 91 days...")
scenario.run_days(91.1)
show(stellantis.vin)
print("  one fresh report resumes the connection:")
odometer = scenario.sim.state_for(stellantis.vin).odometer_km(scenario.clock.now())
consents.report_odometer(stellantis.vin, round(odometer, 1))
show(stellantis.vin)

print("\nrevocation (any time, from the driver portal or by OEM webhook):")
from carconnect.consent import RevokeSource

consents.revoke(bmw.vin, RevokeSource.DRIVER_PORTAL)
show(bmw.vin)
