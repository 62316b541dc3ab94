// Dashboard data loading: series windows, trip list, selected trajectory.
// Kept free of DOM so the polling/refresh logic is unit-testable.

import type { ApiClient } from "./api.js";
import type { RoadSegment, SeriesPoint, TripSummary, TripTrack } from "./types.js";
import { downsampleSeconds } from "./charts.js";

export const CHART_KINDS = ["fuel_volume", "distance_to_next_maintenance", "odometer"] as const;
export const REFRESH_INTERVAL_MS = 5000;

export interface DashboardData {
  now: string;
  series: Record<string, SeriesPoint[]>;
  trips: TripSummary[];
  selectedTrip: number | null;
  track: TripTrack | null;
  roads: RoadSegment[];
}

export async function loadDashboard(
  api: ApiClient,
  vin: string,
  selectedTrip: number | null,
  windowDays = 30,
): Promise<DashboardData> {
  const { now } = await api.simClock();
  const end = Date.parse(now);
  const start = new Date(end - windowDays * 86_400_000).toISOString();
  const downsample = downsampleSeconds(windowDays * 86_400);
  const series: Record<string, SeriesPoint[]> = {};
  for (const kind of CHART_KINDS) {
    series[kind] = await api.series(vin, kind, { start, end: now, downsampleS: downsample });
  }
  const trips = await api.trips(vin);
  let effectiveSelection = selectedTrip;
  if (effectiveSelection !== null && effectiveSelection >= trips.length) effectiveSelection = null;
  if (effectiveSelection === null && trips.length > 0) effectiveSelection = trips.length - 1;
  let track: TripTrack | null = null;
  if (effectiveSelection !== null) {
    track = await api.tripTrack(vin, effectiveSelection);
  }
  const roads = await api.mapRoads();
  return { now, series, trips, selectedTrip: effectiveSelection, track, roads };
}

export function describeTrip(trip: TripSummary, index: number): string {
  const start = trip.start.replace("T", " ").slice(0, 16);
  return (
    `#${index + 1}  ${start}  ${trip.distance_km.toFixed(1)} km` +
    (trip.night_km > 0.05 ? `  (night ${trip.night_km.toFixed(1)} km)` : "")
  );
}
