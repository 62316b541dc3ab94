// Contract tests against recorded platform API transcripts: the console's
// view models must consume the server's actual wire format unchanged.

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { describe, expect, it } from "vitest";

import { seriesChart, trajectoryMap } from "../src/charts.js";
import type { ConsentRecord, OemProfile, SeriesPoint } from "../src/types.js";
import { odometerCountdownDays, reviewSheet, wizardSteps } from "../src/wizard.js";

const here = dirname(fileURLToPath(import.meta.url));
const transcripts = JSON.parse(readFileSync(join(here, "fixtures", "transcripts.json"), "utf-8"));

describe("profile transcript", () => {
  it("review sheet lists the exact catalog the server serves", () => {
    const profile = transcripts.profile_bmw as OemProfile;
    const sheet = reviewSheet(profile);
    expect(sheet.requestKinds).toHaveLength(11);
    expect(sheet.notificationKinds).toHaveLength(8);
    expect(sheet.requestKinds).toContain("gps_coordinates");
    expect(sheet.notificationKinds).toContain("revoke_of_consent");
    expect(sheet.monthlyCostEur).toBe(6.5);
  });

  it("the long-flow brand advertises the complex variant", () => {
    const profile = transcripts.profile_peugeot as OemProfile;
    expect(profile.consent_variant).toBe("stellantis_complex");
  });
});

describe("recorded simple-portal walkthrough", () => {
  it("every recorded state renders a coherent step list", () => {
    const walk = transcripts.simple_walkthrough as Array<{ step: string; record: ConsentRecord }>;
    const byStep = Object.fromEntries(walk.map((w) => [w.step, w.record]));
    expect(wizardSteps(byStep.initiate).map((s) => s.status)).toEqual(["current", "pending"]);
    expect(wizardSteps(byStep.review).map((s) => s.status)).toEqual(["done", "current"]);
    expect(wizardSteps(byStep.confirm).every((s) => s.status === "done")).toBe(true);
    expect(byStep.confirm.state).toBe("active");
    expect(byStep.confirm.access_token_ref).toBeTruthy();
  });

  it("link sessions are driver-scoped to the enrolled vehicle", () => {
    const walk = transcripts.simple_walkthrough as Array<{ step: string; record: any }>;
    const session = walk.find((w) => w.step === "session_from_link")!.record;
    expect(session.role).toBe("driver");
    expect(session.vin).toBe(walk[0].record.vin);
  });
});

describe("recorded long-flow consent", () => {
  it("active record carries the quarterly countdown", () => {
    const record = transcripts.consent_stellantis_active as ConsentRecord;
    expect(record.variant).toBe("stellantis_complex");
    expect(record.state).toBe("active");
    const days = odometerCountdownDays(record, transcripts.clock.now);
    expect(days).not.toBeNull();
    expect(days!).toBeGreaterThan(0);
    expect(days!).toBeLessThanOrEqual(90);
  });
});

describe("recorded telemetry", () => {
  it("fuel and maintenance series render chart paths", () => {
    for (const key of ["series_fuel", "series_maintenance"]) {
      const points = transcripts[key] as SeriesPoint[];
      expect(points.length).toBeGreaterThan(1);
      const model = seriesChart(points);
      expect(model.empty).toBe(false);
      expect(model.path.length).toBeGreaterThan(10);
    }
  });

  it("a recorded trip track projects onto the map with the bundled roads", () => {
    const model = trajectoryMap(transcripts.track.points, transcripts.roads);
    expect(model.empty).toBe(false);
    expect(model.roadPaths.length).toBe(transcripts.roads.length);
    expect(model.markers.length).toBeGreaterThan(0);
  });

  it("trip summaries expose what the selector shows", () => {
    const trips = transcripts.trips as Array<Record<string, unknown>>;
    expect(trips.length).toBeGreaterThan(0);
    for (const trip of trips) {
      expect(trip).toHaveProperty("start");
      expect(trip).toHaveProperty("distance_km");
      expect(trip).toHaveProperty("night_km");
    }
  });
});

describe("recorded authorization denial", () => {
  it("driver-only steps are refused to operators by the server", () => {
    const denial = transcripts.operator_denied_driver_step;
    expect(denial.status).toBe(403);
  });
});
