"""Insurance-relevant features derived from stored telemetry.

Pure functions over immutable snapshots: GPS streams are segmented into
trips, distances come from great-circle sums, speeds and harsh-brake
events from consecutive-fix kinematics, overspeed from a local speed-limit
map, and everything aggregates into a per-vehicle risk feature vector.
The cost-viability arithmetic for the data subscription lives here too.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .domain import (
    CarConnectError,
    DataPointKind,
    GpsPoint,
    NotificationKind,
    TelemetrySample,
    Vin,
    rfc3339,
)
from .geo import haversine_km, point_segment_distance_m
from .storage import SeriesStore
from .timebase import DEFAULT_TZ, in_window

IDLE_GAP_S = 300.0  # silence longer than this splits trips
STATIONARY_GAP_S = 60.0  # a gap this long with almost no movement is a stop
STATIONARY_DISPLACEMENT_M = 50.0
MIN_TRIP_POINTS = 2
MIN_TRIP_KM = 0.1
HARSH_BRAKE_THRESHOLD_MPS2 = 3.5
OVERSPEED_TOLERANCE_KMH = 3.0
MAP_MATCH_RADIUS_M = 30.0
NIGHT_WINDOW = (22, 5)  # [22:00, 05:00) local
COST_VIABILITY_THRESHOLD = 0.05


class UnorderedPoints(CarConnectError):
    pass


class ZeroTimeDelta(CarConnectError):
    pass


class EmptyMap(CarConnectError):
    pass


class MissingData(CarConnectError):
    pass


class NoDataInPeriod(CarConnectError):
    pass


class NonPositivePremium(CarConnectError):
    pass


class NoDataForVin(CarConnectError):
    pass


@dataclass(frozen=True)
class TrackPoint:
    ts: dt.datetime
    lat: float
    lon: float

    @classmethod
    def from_sample(cls, sample: TelemetrySample) -> "TrackPoint":
        if sample.kind is not DataPointKind.GPS_COORDINATES:
            raise ValueError("track points come from gps_coordinates samples")
        point: GpsPoint = sample.value
        return cls(ts=sample.observed_at, lat=point.lat, lon=point.lon)


def track_from_series(samples: Iterable[TelemetrySample]) -> list[TrackPoint]:
    return [TrackPoint.from_sample(s) for s in samples]


# ---------------------------------------------------------------------------
# Distance / speeds
# ---------------------------------------------------------------------------


def compute_distance(points: Sequence[TrackPoint]) -> float:
    """Total great-circle path length in km over chronologically ordered fixes."""
    if len(points) < 2:
        return 0.0
    times = [p.ts for p in points]
    if any(b < a for a, b in zip(times, times[1:])):
        raise UnorderedPoints("points must be chronologically ordered")
    lats = np.array([p.lat for p in points])
    lons = np.array([p.lon for p in points])
    return float(np.sum(haversine_km(lats[:-1], lons[:-1], lats[1:], lons[1:])))


@dataclass(frozen=True)
class SpeedSegment:
    """Motion between two consecutive fixes."""

    t_start: dt.datetime
    t_end: dt.datetime
    distance_km: float
    speed_kmh: float
    mid_lat: float
    mid_lon: float

    @property
    def midpoint_ts(self) -> dt.datetime:
        return self.t_start + (self.t_end - self.t_start) / 2

    @property
    def duration_s(self) -> float:
        return (self.t_end - self.t_start).total_seconds()


def estimate_speeds(points: Sequence[TrackPoint], idle_gap_s: float = IDLE_GAP_S) -> list[SpeedSegment]:
    """Per-segment speed series; gaps longer than idle_gap are excluded."""
    if len(points) < 2:
        return []
    segments: list[SpeedSegment] = []
    lats = np.array([p.lat for p in points])
    lons = np.array([p.lon for p in points])
    hops = haversine_km(lats[:-1], lons[:-1], lats[1:], lons[1:])
    for i in range(len(points) - 1):
        a, b = points[i], points[i + 1]
        delta = (b.ts - a.ts).total_seconds()
        if delta < 0:
            raise UnorderedPoints("points must be chronologically ordered")
        if delta == 0:
            raise ZeroTimeDelta(f"coincident timestamps at {rfc3339(a.ts)}")
        if delta > idle_gap_s:
            continue
        distance = float(hops[i])
        segments.append(
            SpeedSegment(
                t_start=a.ts,
                t_end=b.ts,
                distance_km=distance,
                speed_kmh=distance / (delta / 3600.0),
                mid_lat=(a.lat + b.lat) / 2.0,
                mid_lon=(a.lon + b.lon) / 2.0,
            )
        )
    return segments


@dataclass(frozen=True)
class BrakeEvent:
    at: dt.datetime
    decel_mps2: float


def detect_harsh_brakes(
    segments: Sequence[SpeedSegment], threshold_mps2: float = HARSH_BRAKE_THRESHOLD_MPS2
) -> list[BrakeEvent]:
    """Deceleration events between consecutive motion segments.

    The deceleration between segments is the speed drop over the time
    between their midpoints; runs of consecutive qualifying boundaries
    merge into a single event (one physical braking maneuver).
    """
    events: list[BrakeEvent] = []
    run_active = False
    run_peak = 0.0
    run_at: Optional[dt.datetime] = None
    for a, b in zip(segments, segments[1:]):
        if b.t_start != a.t_end:
            run_active = False
            continue
        mid_gap = (b.midpoint_ts - a.midpoint_ts).total_seconds()
        if mid_gap <= 0:
            run_active = False
            continue
        decel = (a.speed_kmh - b.speed_kmh) / 3.6 / mid_gap
        if decel >= threshold_mps2:
            if run_active:
                run_peak = max(run_peak, decel)
            else:
                run_active = True
                run_peak = decel
                run_at = a.t_end
        else:
            if run_active:
                events.append(BrakeEvent(at=run_at, decel_mps2=run_peak))
            run_active = False
    if run_active:
        events.append(BrakeEvent(at=run_at, decel_mps2=run_peak))
    return events


# ---------------------------------------------------------------------------
# Trip segmentation
# ---------------------------------------------------------------------------


def segment_tracks(
    points: Sequence[TrackPoint],
    idle_gap_s: float = IDLE_GAP_S,
    stationary_gap_s: float = STATIONARY_GAP_S,
    stationary_displacement_m: float = STATIONARY_DISPLACEMENT_M,
    min_points: int = MIN_TRIP_POINTS,
    min_distance_km: float = MIN_TRIP_KM,
) -> list[list[TrackPoint]]:
    """Split a GPS stream into trips.

    A boundary falls between consecutive fixes when the gap exceeds
    idle_gap, or when a sampling gap (> stationary_gap) shows nearly no
    displacement, i.e. the vehicle sat still. Fragments with fewer than
    `min_points` fixes or shorter than `min_distance_km` are discarded.
    """
    if not points:
        return []
    times = [p.ts for p in points]
    if any(b < a for a, b in zip(times, times[1:])):
        raise UnorderedPoints("points must be chronologically ordered")
    trips: list[list[TrackPoint]] = []
    current: list[TrackPoint] = [points[0]]
    for prev, here in zip(points, points[1:]):
        delta = (here.ts - prev.ts).total_seconds()
        boundary = delta > idle_gap_s
        if not boundary and delta > stationary_gap_s:
            moved_m = float(haversine_km(prev.lat, prev.lon, here.lat, here.lon)) * 1000.0
            boundary = moved_m < stationary_displacement_m
        if boundary:
            trips.append(current)
            current = [here]
        else:
            current.append(here)
    trips.append(current)
    return [
        trip
        for trip in trips
        if len(trip) >= min_points and compute_distance(trip) >= min_distance_km
    ]


# ---------------------------------------------------------------------------
# Night split
# ---------------------------------------------------------------------------


def night_day_split(
    segments: Sequence[SpeedSegment],
    tz: ZoneInfo = DEFAULT_TZ,
    window: tuple[int, int] = NIGHT_WINDOW,
) -> tuple[float, float]:
    """(night_km, day_km); a segment is night when its midpoint falls in
    the window. day_km is the exact complement so the two always sum to
    the total distance."""
    total = sum(s.distance_km for s in segments)
    night = sum(s.distance_km for s in segments if in_window(s.midpoint_ts, window[0], window[1], tz))
    return night, total - night


# ---------------------------------------------------------------------------
# Speed-limit map and overspeed
# ---------------------------------------------------------------------------


class RoadClass(str, Enum):
    URBAN = "urban"
    RURAL = "rural"
    HIGHWAY = "highway"


@dataclass(frozen=True)
class MapSegment:
    limit_kmh: float
    road_class: RoadClass
    points: tuple[GpsPoint, ...]

    def __post_init__(self) -> None:
        if not 20 <= self.limit_kmh <= 130:
            raise ValueError(f"speed limit out of range: {self.limit_kmh}")
        if len(self.points) < 2:
            raise ValueError("map segment needs at least two points")


class SpeedLimitMap:
    """Set of road polylines with speed limits.

    The on-disk form is plain text, one road per line:

        <limit_kmh> <road_class> <lat,lon> <lat,lon> [...]

    Blank lines and lines starting with '#' are ignored.
    """

    def __init__(self, segments: Sequence[MapSegment]) -> None:
        self.segments = list(segments)
        chords = []
        for seg_index, segment in enumerate(self.segments):
            for a, b in zip(segment.points, segment.points[1:]):
                chords.append((a.lat, a.lon, b.lat, b.lon, seg_index))
        self._chords = chords

    @classmethod
    def from_text(cls, text: str) -> "SpeedLimitMap":
        segments = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise ValueError(f"map line needs limit, class and two points: {line!r}")
            limit = float(parts[0])
            road_class = RoadClass(parts[1])
            points = []
            for token in parts[2:]:
                lat, lon = token.split(",")
                points.append(GpsPoint(lat=float(lat), lon=float(lon)))
            segments.append(MapSegment(limit_kmh=limit, road_class=road_class, points=tuple(points)))
        return cls(segments)

    @classmethod
    def from_file(cls, path: Path | str) -> "SpeedLimitMap":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def match(self, lat: float, lon: float, radius_m: float = MAP_MATCH_RADIUS_M) -> Optional[MapSegment]:
        """Nearest road segment within the matching radius, if any."""
        best: Optional[tuple[float, int]] = None
        for alat, alon, blat, blon, seg_index in self._chords:
            distance = point_segment_distance_m(lat, lon, alat, alon, blat, blon)
            if distance <= radius_m and (best is None or distance < best[0]):
                best = (distance, seg_index)
        return self.segments[best[1]] if best else None


@dataclass
class OverspeedResult:
    overspeed_km: float = 0.0
    uncovered_km: float = 0.0
    matched_km: float = 0.0
    by_class_km: dict[str, float] = field(default_factory=dict)
    by_class_overspeed_km: dict[str, float] = field(default_factory=dict)


def compute_overspeed(
    segments: Sequence[SpeedSegment],
    speed_map: SpeedLimitMap,
    tolerance_kmh: float = OVERSPEED_TOLERANCE_KMH,
    radius_m: float = MAP_MATCH_RADIUS_M,
) -> OverspeedResult:
    """Match each motion segment to the map and tally distance driven above
    the limit (+tolerance). Unmatched distance is reported as uncovered,
    never classified."""
    if not speed_map.segments:
        raise EmptyMap("speed-limit map has no segments")
    result = OverspeedResult()
    for segment in segments:
        road = speed_map.match(segment.mid_lat, segment.mid_lon, radius_m)
        if road is None:
            result.uncovered_km += segment.distance_km
            continue
        result.matched_km += segment.distance_km
        cls_key = road.road_class.value
        result.by_class_km[cls_key] = result.by_class_km.get(cls_key, 0.0) + segment.distance_km
        if segment.speed_kmh > road.limit_kmh + tolerance_kmh:
            result.overspeed_km += segment.distance_km
            result.by_class_overspeed_km[cls_key] = (
                result.by_class_overspeed_km.get(cls_key, 0.0) + segment.distance_km
            )
    return result


# ---------------------------------------------------------------------------
# Trip summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TripSummary:
    vin: str
    start: dt.datetime
    end: dt.datetime
    distance_km: float
    night_km: float
    max_speed_kmh: float
    mean_speed_kmh: float
    harsh_brake_count: int
    overspeed_km: float
    point_count: int

    def __post_init__(self) -> None:
        if self.point_count < MIN_TRIP_POINTS:
            raise ValueError("a trip summary needs at least two points")
        if not -1e-9 <= self.night_km <= self.distance_km + 1e-9:
            raise ValueError("night_km must lie in [0, distance_km]")
        if not -1e-9 <= self.overspeed_km <= self.distance_km + 1e-9:
            raise ValueError("overspeed_km must lie in [0, distance_km]")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin,
            "start": rfc3339(self.start),
            "end": rfc3339(self.end),
            "distance_km": round(self.distance_km, 4),
            "night_km": round(self.night_km, 4),
            "max_speed_kmh": round(self.max_speed_kmh, 2),
            "mean_speed_kmh": round(self.mean_speed_kmh, 2),
            "harsh_brake_count": self.harsh_brake_count,
            "overspeed_km": round(self.overspeed_km, 4),
            "point_count": self.point_count,
        }


def summarize_trip(
    vin: Vin | str,
    points: Sequence[TrackPoint],
    speed_map: Optional[SpeedLimitMap] = None,
    tz: ZoneInfo = DEFAULT_TZ,
    brake_threshold_mps2: float = HARSH_BRAKE_THRESHOLD_MPS2,
) -> TripSummary:
    segments = estimate_speeds(points)
    distance = compute_distance(points)
    night, _ = night_day_split(segments, tz)
    moving_s = sum(s.duration_s for s in segments)
    overspeed = 0.0
    if speed_map is not None and speed_map.segments:
        overspeed = compute_overspeed(segments, speed_map).overspeed_km
    return TripSummary(
        vin=vin.value if isinstance(vin, Vin) else vin,
        start=points[0].ts,
        end=points[-1].ts,
        distance_km=distance,
        night_km=night,
        max_speed_kmh=max((s.speed_kmh for s in segments), default=0.0),
        mean_speed_kmh=(distance / (moving_s / 3600.0)) if moving_s > 0 else 0.0,
        harsh_brake_count=len(detect_harsh_brakes(segments, brake_threshold_mps2)),
        overspeed_km=overspeed,
        point_count=len(points),
    )


def segment_trips(
    vin: Vin | str,
    series: SeriesStore,
    start: Optional[dt.datetime] = None,
    end: Optional[dt.datetime] = None,
    speed_map: Optional[SpeedLimitMap] = None,
    tz: ZoneInfo = DEFAULT_TZ,
    idle_gap_s: float = IDLE_GAP_S,
) -> list[TripSummary]:
    """Trips recovered from a VIN's stored gps_coordinates series."""
    samples = series.query_series(vin, DataPointKind.GPS_COORDINATES, start, end)
    tracks = segment_tracks(track_from_series(samples), idle_gap_s=idle_gap_s)
    return [summarize_trip(vin, track, speed_map, tz) for track in tracks]


# ---------------------------------------------------------------------------
# Risk features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskFeatureVector:
    vin: str
    period_start: dt.datetime
    period_end: dt.datetime
    total_km: float
    night_fraction: float
    urban_fraction: float
    overspeed_fraction: float
    harsh_brakes_per_100km: float
    accident_count: int
    breakdown_count: int
    emergency_count: int

    def __post_init__(self) -> None:
        for name in ("night_fraction", "urban_fraction", "overspeed_fraction"):
            value = getattr(self, name)
            if not -1e-9 <= value <= 1.0 + 1e-9:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin,
            "period_start": rfc3339(self.period_start),
            "period_end": rfc3339(self.period_end),
            "total_km": round(self.total_km, 4),
            "night_fraction": round(self.night_fraction, 6),
            "urban_fraction": round(self.urban_fraction, 6),
            "overspeed_fraction": round(self.overspeed_fraction, 6),
            "harsh_brakes_per_100km": round(self.harsh_brakes_per_100km, 6),
            "accident_flags": {
                "accident": self.accident_count,
                "breakdown": self.breakdown_count,
                "emergency": self.emergency_count,
            },
        }


def build_risk_features(
    vin: Vin | str,
    series: SeriesStore,
    period_start: dt.datetime,
    period_end: dt.datetime,
    speed_map: Optional[SpeedLimitMap] = None,
    tz: ZoneInfo = DEFAULT_TZ,
) -> RiskFeatureVector:
    """Aggregate trips and event counts over a period into one vector."""
    vin_obj = vin if isinstance(vin, Vin) else Vin(vin)
    samples = series.query_series(vin_obj, DataPointKind.GPS_COORDINATES, period_start, period_end)
    tracks = segment_tracks(track_from_series(samples))
    if not tracks:
        raise NoDataInPeriod(f"no trips for {vin_obj} in the requested period")
    total = 0.0
    night = 0.0
    urban = 0.0
    overspeed = 0.0
    brakes = 0
    for track in tracks:
        segments = estimate_speeds(track)
        total += compute_distance(track)
        night += night_day_split(segments, tz)[0]
        brakes += len(detect_harsh_brakes(segments))
        if speed_map is not None and speed_map.segments:
            matched = compute_overspeed(segments, speed_map)
            urban += matched.by_class_km.get(RoadClass.URBAN.value, 0.0)
            overspeed += matched.overspeed_km
    events = series.query_events(vin_obj, start=period_start, end=period_end)
    counts = {kind: 0 for kind in NotificationKind}
    for event in events:
        counts[event.kind] += 1
    return RiskFeatureVector(
        vin=vin_obj.value,
        period_start=period_start,
        period_end=period_end,
        total_km=total,
        night_fraction=night / total if total > 0 else 0.0,
        urban_fraction=urban / total if total > 0 else 0.0,
        overspeed_fraction=overspeed / total if total > 0 else 0.0,
        harsh_brakes_per_100km=brakes / (total / 100.0) if total > 0 else 0.0,
        accident_count=counts[NotificationKind.ACCIDENT_REPORTED],
        breakdown_count=counts[NotificationKind.BREAKDOWN_REPORTED],
        emergency_count=counts[NotificationKind.EMERGENCY_REPORTED],
    )


# ---------------------------------------------------------------------------
# Cost viability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostVerdict:
    data_cost_eur_month: float
    premium_eur_month: float
    ratio: float
    verdict: str  # "viable" | "high-value-only"

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "data_cost_eur_month": self.data_cost_eur_month,
            "premium_eur_month": self.premium_eur_month,
            "ratio": round(self.ratio, 6),
            "verdict": self.verdict,
        }


def cost_viability(
    data_cost_eur_month: float,
    premium_eur_month: float,
    threshold: float = COST_VIABILITY_THRESHOLD,
) -> CostVerdict:
    """Data-subscription cost as a share of the premium, with a verdict.

    Above the threshold the connection only pays off for high-premium
    (luxury) policies.
    """
    if premium_eur_month <= 0:
        raise NonPositivePremium("premium must be positive")
    ratio = data_cost_eur_month / premium_eur_month
    return CostVerdict(
        data_cost_eur_month=data_cost_eur_month,
        premium_eur_month=premium_eur_month,
        ratio=ratio,
        verdict="viable" if ratio <= threshold else "high-value-only",
    )


# ---------------------------------------------------------------------------
# Theft investigation report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheftReport:
    vin: str
    last_lock_state: Optional[bool]
    last_lock_at: Optional[dt.datetime]
    last_trajectory: list[TrackPoint]
    last_seen_at: dt.datetime

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "vin": self.vin,
            "last_lock_state": self.last_lock_state,
            "last_lock_at": rfc3339(self.last_lock_at) if self.last_lock_at else None,
            "last_trajectory": [
                {"ts": rfc3339(p.ts), "lat": p.lat, "lon": p.lon} for p in self.last_trajectory
            ],
            "last_seen_at": rfc3339(self.last_seen_at),
        }


def theft_report(vin: Vin | str, series: SeriesStore) -> TheftReport:
    """Lock status, final trajectory and last-seen time for investigations."""
    vin_obj = vin if isinstance(vin, Vin) else Vin(vin)
    last = series.last_known(vin_obj, list(DataPointKind))
    events = series.query_events(vin_obj)
    last_times = [s.observed_at for s in last.values()] + [e.emitted_at for e in events]
    if not last_times:
        raise NoDataForVin(f"nothing stored for {vin_obj}")
    lock = last.get(DataPointKind.DOORS_LOCK_STATE)
    gps = series.query_series(vin_obj, DataPointKind.GPS_COORDINATES)
    tracks = segment_tracks(track_from_series(gps))
    return TheftReport(
        vin=vin_obj.value,
        last_lock_state=bool(lock.value) if lock is not None else None,
        last_lock_at=lock.observed_at if lock is not None else None,
        last_trajectory=tracks[-1] if tracks else [],
        last_seen_at=max(last_times),
    )
