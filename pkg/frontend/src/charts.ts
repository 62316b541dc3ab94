// SVG chart building, dependency-free. Pure functions produce path data
// and tick view models; the DOM layer just drops them into <svg> nodes.

import type { RoadSegment, SeriesPoint, TrackPoint } from "./types.js";

export interface ChartModel {
  path: string;
  xTicks: Array<{ x: number; label: string }>;
  yTicks: Array<{ y: number; label: string }>;
  empty: boolean;
}

export interface Extent {
  min: number;
  max: number;
}

export function extent(values: number[]): Extent {
  if (values.length === 0) return { min: 0, max: 1 };
  let min = values[0];
  let max = values[0];
  for (const v of values) {
    if (v < min) min = v;
    if (v > max) max = v;
  }
  if (min === max) {
    min -= 1;
    max += 1;
  }
  return { min, max };
}

export function scale(domain: Extent, range: [number, number]): (v: number) => number {
  const span = domain.max - domain.min;
  return (v) => range[0] + ((v - domain.min) / span) * (range[1] - range[0]);
}

/** Pick a downsampling bucket so a window renders ~`targetPoints` points. */
export function downsampleSeconds(windowS: number, targetPoints = 300): number {
  return Math.max(1, Math.round(windowS / targetPoints));
}

function numericValue(point: SeriesPoint): number | null {
  if (typeof point.value === "number") return point.value;
  if (typeof point.value === "boolean") return point.value ? 1 : 0;
  return null;
}

export function seriesChart(points: SeriesPoint[], width = 640, height = 180, margin = 34): ChartModel {
  const usable = points
    .map((p) => ({ t: Date.parse(p.observed_at), v: numericValue(p) }))
    .filter((p): p is { t: number; v: number } => p.v !== null);
  if (usable.length < 2) {
    return { path: "", xTicks: [], yTicks: [], empty: true };
  }
  const xDomain = extent(usable.map((p) => p.t));
  const yDomain = extent(usable.map((p) => p.v));
  const x = scale(xDomain, [margin, width - 8]);
  const y = scale(yDomain, [height - 20, 8]);
  const path = usable
    .map((p, i) => `${i === 0 ? "M" : "L"}${x(p.t).toFixed(1)},${y(p.v).toFixed(1)}`)
    .join(" ");
  const xTicks = [0, 0.5, 1].map((f) => {
    const t = xDomain.min + f * (xDomain.max - xDomain.min);
    const date = new Date(t);
    return { x: x(t), label: `${date.getUTCMonth() + 1}/${date.getUTCDate()} ${String(date.getUTCHours()).padStart(2, "0")}h` };
  });
  const yTicks = [0, 0.5, 1].map((f) => {
    const v = yDomain.min + f * (yDomain.max - yDomain.min);
    return { y: y(v), label: v >= 1000 ? v.toFixed(0) : v.toFixed(1) };
  });
  return { path, xTicks, yTicks, empty: false };
}

// -- trajectory map ----------------------------------------------------------

export interface MapModel {
  trackPath: string;
  roadPaths: Array<{ path: string; road_class: string }>;
  markers: Array<{ x: number; y: number; point: TrackPoint }>;
  start: { x: number; y: number } | null;
  end: { x: number; y: number } | null;
  empty: boolean;
}

interface Projection {
  x: (lon: number) => number;
  y: (lat: number) => number;
}

function buildProjection(lats: number[], lons: number[], width: number, height: number, pad: number): Projection {
  const latExtent = extent(lats);
  const lonExtent = extent(lons);
  const midLat = (latExtent.min + latExtent.max) / 2;
  const kx = Math.cos((midLat * Math.PI) / 180);
  // keep aspect ratio: meters per pixel equal on both axes
  const lonSpan = (lonExtent.max - lonExtent.min) * kx;
  const latSpan = latExtent.max - latExtent.min;
  const unit = Math.max(lonSpan / (width - 2 * pad), latSpan / (height - 2 * pad));
  const cx = (lonExtent.min + lonExtent.max) / 2;
  const cy = midLat;
  return {
    x: (lon) => width / 2 + ((lon - cx) * kx) / unit,
    y: (lat) => height / 2 - (lat - cy) / unit,
  };
}

export function trajectoryMap(
  track: TrackPoint[],
  roads: RoadSegment[],
  width = 520,
  height = 420,
  markerEvery = 10,
): MapModel {
  if (track.length < 2) {
    return { trackPath: "", roadPaths: [], markers: [], start: null, end: null, empty: true };
  }
  const projection = buildProjection(
    track.map((p) => p.lat),
    track.map((p) => p.lon),
    width,
    height,
    24,
  );
  const toPath = (pts: Array<{ lat: number; lon: number }>) =>
    pts.map((p, i) => `${i === 0 ? "M" : "L"}${projection.x(p.lon).toFixed(1)},${projection.y(p.lat).toFixed(1)}`).join(" ");
  const markers = track
    .filter((_, i) => i % markerEvery === 0 || i === track.length - 1)
    .map((p) => ({ x: projection.x(p.lon), y: projection.y(p.lat), point: p }));
  return {
    trackPath: toPath(track),
    roadPaths: roads.map((r) => ({ path: toPath(r.points), road_class: r.road_class })),
    markers,
    start: { x: projection.x(track[0].lon), y: projection.y(track[0].lat) },
    end: { x: projection.x(track[track.length - 1].lon), y: projection.y(track[track.length - 1].lat) },
    empty: false,
  };
}

export function markerPopupText(point: TrackPoint): string {
  const time = point.ts.replace("T", " ").replace(/\.\d+Z$/, " UTC");
  return `${time}\nspeed ${point.speed_kmh.toFixed(1)} km/h\nheading ${point.heading_deg.toFixed(0)} deg`;
}
