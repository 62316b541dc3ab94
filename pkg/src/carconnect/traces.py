"""Synthetic trip traces with per-trip ground truth.

The generator turns a statistical trip model into concrete journeys:
piecewise-constant-speed GPS polylines at a fixed internal step, explicit
scripted braking events, and per-trip ground truth (distance, night
share, brake count) recorded from the kinematics themselves. Analytics
results are judged against these numbers, so the ground truth is always
the realized trajectory, never the sampled targets.

Everything is a pure function of (model, seed, horizon): the same inputs
reproduce byte-identical traces.
"""

from __future__ import annotations

import bisect
import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from zoneinfo import ZoneInfo

from .domain import GpsPoint, UTC, parse_rfc3339, rfc3339
from .geo import haversine_km, step_positions
from .timebase import DEFAULT_TZ, in_window

TRIP_STEP_S = 2.0  # internal kinematic resolution
NIGHT_START_HOUR = 22
NIGHT_END_HOUR = 5
MIN_TRIP_GAP_S = 1200.0  # parking time between consecutive trips

# Non-scripted speed changes stay below the harsh-brake threshold with a
# comfortable margin so only scripted events are ever detectable.
ACCEL_MPS2 = 1.4
GENTLE_DECEL_MPS2 = 1.8
HARSH_BRAKE_MIN_DROP_KMH = 32.0
HARSH_BRAKE_MAX_DROP_KMH = 46.0


@dataclass(frozen=True)
class SpeedProfile:
    """Cruise-speed mix: how a trip's distance splits across road classes."""

    urban_fraction: float = 0.5
    rural_fraction: float = 0.3
    highway_fraction: float = 0.2
    urban_kmh: float = 45.0
    rural_kmh: float = 75.0
    highway_kmh: float = 110.0

    def __post_init__(self) -> None:
        total = self.urban_fraction + self.rural_fraction + self.highway_fraction
        if not math.isclose(total, 1.0, abs_tol=1e-6):
            raise ValueError(f"road-class fractions must sum to 1, got {total}")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "urban_fraction": self.urban_fraction,
            "rural_fraction": self.rural_fraction,
            "highway_fraction": self.highway_fraction,
            "urban_kmh": self.urban_kmh,
            "rural_kmh": self.rural_kmh,
            "highway_kmh": self.highway_kmh,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "SpeedProfile":
        return cls(**payload)


@dataclass(frozen=True)
class TripModel:
    """Statistical description of how a vehicle is driven."""

    trips_per_day: float = 1.0
    trip_length_km_mean: float = 12.0
    trip_length_km_spread: float = 0.4  # sigma of the log-length distribution
    night_trip_fraction: float = 0.15
    speed_profile: SpeedProfile = field(default_factory=SpeedProfile)
    harsh_brake_rate_per_100km: float = 2.0
    gps_emit_interval_s: float = 30.0

    def __post_init__(self) -> None:
        if self.trips_per_day <= 0:
            raise ValueError("trips_per_day must be positive")
        if self.trip_length_km_mean <= 0:
            raise ValueError("trip_length_km_mean must be positive")
        if self.trip_length_km_spread < 0:
            raise ValueError("trip_length_km_spread cannot be negative")
        if not 0.0 <= self.night_trip_fraction <= 1.0:
            raise ValueError("night_trip_fraction must lie in [0, 1]")
        if self.harsh_brake_rate_per_100km < 0:
            raise ValueError("harsh_brake_rate_per_100km cannot be negative")
        if self.gps_emit_interval_s < 1.0:
            raise ValueError("gps_emit_interval_s must be at least 1 second")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "trips_per_day": self.trips_per_day,
            "trip_length_km_mean": self.trip_length_km_mean,
            "trip_length_km_spread": self.trip_length_km_spread,
            "night_trip_fraction": self.night_trip_fraction,
            "speed_profile": self.speed_profile.to_json_dict(),
            "harsh_brake_rate_per_100km": self.harsh_brake_rate_per_100km,
            "gps_emit_interval_s": self.gps_emit_interval_s,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "TripModel":
        data = dict(payload)
        data["speed_profile"] = SpeedProfile.from_json_dict(data.get("speed_profile", {}))
        return cls(**data)


@dataclass
class Trip:
    """One realized journey: uniform-step polyline plus ground truth."""

    start: dt.datetime
    step_s: float
    lats: np.ndarray  # n+1 points
    lons: np.ndarray
    speeds_kmh: np.ndarray  # n step speeds
    headings_deg: np.ndarray  # n step headings
    distance_km: float
    night_km: float
    harsh_brake_count: int
    brake_times: list[dt.datetime] = field(default_factory=list)

    def __post_init__(self) -> None:
        steps = len(self.speeds_kmh)
        if len(self.lats) != steps + 1 or len(self.lons) != steps + 1:
            raise ValueError("polyline must have one more point than steps")
        self._cum_km = np.concatenate(([0.0], np.cumsum(self.speeds_kmh / 3600.0 * self.step_s)))

    @property
    def end(self) -> dt.datetime:
        return self.start + dt.timedelta(seconds=self.step_s * len(self.speeds_kmh))

    @property
    def duration_s(self) -> float:
        return self.step_s * len(self.speeds_kmh)

    def covers(self, ts: dt.datetime) -> bool:
        return self.start <= ts < self.end

    def _frac_index(self, ts: dt.datetime) -> float:
        offset = (ts - self.start).total_seconds()
        return min(max(offset / self.step_s, 0.0), float(len(self.speeds_kmh)))

    def position_at(self, ts: dt.datetime) -> GpsPoint:
        x = self._frac_index(ts)
        i = min(int(x), len(self.speeds_kmh) - 1)
        frac = x - i
        return GpsPoint(
            lat=float(self.lats[i] + (self.lats[i + 1] - self.lats[i]) * frac),
            lon=float(self.lons[i] + (self.lons[i + 1] - self.lons[i]) * frac),
        )

    def speed_at(self, ts: dt.datetime) -> float:
        i = min(int(self._frac_index(ts)), len(self.speeds_kmh) - 1)
        return float(self.speeds_kmh[i])

    def heading_at(self, ts: dt.datetime) -> float:
        i = min(int(self._frac_index(ts)), len(self.headings_deg) - 1)
        return float(self.headings_deg[i]) % 360.0

    def distance_at(self, ts: dt.datetime) -> float:
        """Kilometers covered within this trip up to `ts`."""
        x = self._frac_index(ts)
        i = min(int(x), len(self.speeds_kmh) - 1)
        frac = x - i
        return float(self._cum_km[i] + (self._cum_km[i + 1] - self._cum_km[i]) * frac)

    def point_times(self) -> list[dt.datetime]:
        return [self.start + dt.timedelta(seconds=self.step_s * i) for i in range(len(self.lats))]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "start": rfc3339(self.start),
            "step_s": self.step_s,
            "lats": [round(float(v), 7) for v in self.lats],
            "lons": [round(float(v), 7) for v in self.lons],
            "speeds_kmh": [round(float(v), 3) for v in self.speeds_kmh],
            "headings_deg": [round(float(v), 3) for v in self.headings_deg],
            "distance_km": self.distance_km,
            "night_km": self.night_km,
            "harsh_brake_count": self.harsh_brake_count,
            "brake_times": [rfc3339(t) for t in self.brake_times],
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Any]) -> "Trip":
        return cls(
            start=parse_rfc3339(payload["start"]),
            step_s=float(payload["step_s"]),
            lats=np.asarray(payload["lats"], dtype=float),
            lons=np.asarray(payload["lons"], dtype=float),
            speeds_kmh=np.asarray(payload["speeds_kmh"], dtype=float),
            headings_deg=np.asarray(payload["headings_deg"], dtype=float),
            distance_km=float(payload["distance_km"]),
            night_km=float(payload["night_km"]),
            harsh_brake_count=int(payload["harsh_brake_count"]),
            brake_times=[parse_rfc3339(t) for t in payload.get("brake_times", [])],
        )


def night_share_of_steps(
    start: dt.datetime, step_s: float, step_km: np.ndarray, tz: ZoneInfo = DEFAULT_TZ
) -> float:
    """Kilometers of steps whose midpoint falls in the night window."""
    total = 0.0
    for i, km in enumerate(step_km):
        midpoint = start + dt.timedelta(seconds=step_s * (i + 0.5))
        if in_window(midpoint, NIGHT_START_HOUR, NIGHT_END_HOUR, tz):
            total += float(km)
    return total


def build_trip_from_legs(
    start: dt.datetime,
    origin: GpsPoint,
    legs: Sequence[tuple[float, float, float]],
    step_s: float = TRIP_STEP_S,
    tz: ZoneInfo = DEFAULT_TZ,
) -> Trip:
    """Deterministic trip from explicit (speed_kmh, heading_deg, duration_s) legs.

    Used for hand-built fixtures where exact distances matter; durations
    are rounded to whole steps. Brake ground truth is derived from the
    leg-to-leg decelerations, mirroring what a detector at the same step
    resolution can observe.
    """
    speeds: list[float] = []
    headings: list[float] = []
    for speed_kmh, heading_deg, duration_s in legs:
        steps = max(1, round(duration_s / step_s))
        speeds.extend([float(speed_kmh)] * steps)
        headings.extend([float(heading_deg) % 360.0] * steps)
    speeds_arr = np.asarray(speeds)
    headings_arr = np.asarray(headings)
    step_km = speeds_arr / 3600.0 * step_s
    lats, lons = step_positions(origin.lat, origin.lon, step_km, headings_arr)
    brake_times = []
    for i in range(len(speeds_arr) - 1):
        decel = (speeds_arr[i] - speeds_arr[i + 1]) / 3.6 / step_s
        if decel >= 3.5:
            brake_times.append(start + dt.timedelta(seconds=step_s * (i + 1)))
    return Trip(
        start=start,
        step_s=step_s,
        lats=lats,
        lons=lons,
        speeds_kmh=speeds_arr,
        headings_deg=headings_arr,
        distance_km=float(np.sum(step_km)),
        night_km=night_share_of_steps(start, step_s, step_km, tz),
        harsh_brake_count=len(brake_times),
        brake_times=brake_times,
    )


class _ChunkedNormal:
    """Normal draws taken from the rng in blocks; scalar draws are too slow
    for per-step use in long generations."""

    def __init__(self, rng: np.random.Generator, sigma: float, block: int = 1024) -> None:
        self._rng = rng
        self._sigma = sigma
        self._block = block
        self._buffer = rng.normal(0.0, sigma, size=block)
        self._pos = 0

    def next(self) -> float:
        if self._pos >= self._buffer.size:
            self._buffer = self._rng.normal(0.0, self._sigma, size=self._block)
            self._pos = 0
        value = float(self._buffer[self._pos])
        self._pos += 1
        return value


class TraceGenerator:
    """Seeded builder of multi-day trip schedules for one vehicle."""

    def __init__(self, model: TripModel, home: GpsPoint, tz: ZoneInfo = DEFAULT_TZ) -> None:
        self.model = model
        self.home = home
        self.tz = tz

    def generate(self, start_day: dt.date, days: int, seed: int) -> list[Trip]:
        if days < 1:
            raise ValueError("days must be >= 1")
        rng = np.random.default_rng(seed)
        starts = self._plan_starts(start_day, days, rng)
        trips: list[Trip] = []
        position = self.home
        previous_end: Optional[dt.datetime] = None
        for idx, candidate in enumerate(starts):
            start = candidate
            if previous_end is not None:
                earliest = previous_end + dt.timedelta(seconds=MIN_TRIP_GAP_S)
                if start < earliest:
                    start = earliest
            outbound = idx % 2 == 0
            trip = self._build_trip(start, position, outbound, rng)
            trips.append(trip)
            position = GpsPoint(lat=float(trip.lats[-1]), lon=float(trip.lons[-1]))
            previous_end = trip.end
        return trips

    # -- schedule ---------------------------------------------------------------

    def _plan_starts(self, start_day: dt.date, days: int, rng: np.random.Generator) -> list[dt.datetime]:
        starts: list[dt.datetime] = []
        for day_index in range(days):
            day = start_day + dt.timedelta(days=day_index)
            count = int(rng.poisson(self.model.trips_per_day))
            for _ in range(count):
                if rng.uniform() < self.model.night_trip_fraction:
                    # Night departures spread over 22:00 today .. 03:59 tomorrow.
                    offset_h = 22.0 + rng.uniform(0.0, 6.0)
                else:
                    offset_h = rng.uniform(6.5, 20.5)
                # whole seconds: timestamps stay on the millisecond grid the
                # serialization contract guarantees
                offset_s = round(offset_h * 3600.0)
                local = dt.datetime.combine(day, dt.time(0, 0), tzinfo=self.tz) + dt.timedelta(seconds=offset_s)
                starts.append(local.astimezone(UTC))
        return sorted(starts)

    # -- one trip ---------------------------------------------------------------

    def _build_trip(
        self, start: dt.datetime, origin: GpsPoint, outbound: bool, rng: np.random.Generator
    ) -> Trip:
        model = self.model
        length_target = model.trip_length_km_mean * float(
            np.exp(rng.normal(0.0, model.trip_length_km_spread) - model.trip_length_km_spread**2 / 2.0)
        )
        length_target = max(0.4, length_target)
        planned_brakes = int(rng.poisson(model.harsh_brake_rate_per_100km * length_target / 100.0))
        brake_marks = sorted(rng.uniform(0.15, 0.85, size=planned_brakes) * length_target)

        profile = model.speed_profile
        phases: list[tuple[float, float]] = []  # (distance_km, cruise_kmh)
        if length_target < 2.5:
            phases.append((length_target, profile.urban_kmh))
        else:
            u, r, h = profile.urban_fraction, profile.rural_fraction, profile.highway_fraction
            plan = [
                (length_target * u / 2.0, profile.urban_kmh),
                (length_target * r / 2.0, profile.rural_kmh),
                (length_target * h, profile.highway_kmh),
                (length_target * r / 2.0, profile.rural_kmh),
                (length_target * u / 2.0, profile.urban_kmh),
            ]
            phases = [(d, v) for d, v in plan if d > 0.01]
        # Jitter cruise speeds slightly so traces differ between trips.
        phases = [(d, v * float(rng.uniform(0.92, 1.08))) for d, v in phases]

        if outbound:
            base_heading = float(rng.uniform(0.0, 360.0))
        else:
            base_heading = self._bearing_to_home(origin) + float(rng.uniform(-15.0, 15.0))

        step = TRIP_STEP_S
        speeds: list[float] = []
        headings: list[float] = []
        brake_steps: list[int] = []
        current = 20.0  # pull-away speed
        covered = 0.0
        next_brake = brake_marks.pop(0) if brake_marks else None
        accel_step = ACCEL_MPS2 * step * 3.6
        decel_step = GENTLE_DECEL_MPS2 * step * 3.6
        heading = base_heading % 360.0
        cooldown = 0
        drift = _ChunkedNormal(rng, sigma=2.5)
        for phase_dist, cruise in phases:
            phase_end = covered + phase_dist
            while covered < phase_end:
                # steer: small drift keeps the polyline from being a ruler line
                heading = (heading + drift.next()) % 360.0
                if next_brake is not None and covered >= next_brake and current >= 42.0 and cooldown == 0:
                    drop = float(rng.uniform(HARSH_BRAKE_MIN_DROP_KMH, HARSH_BRAKE_MAX_DROP_KMH))
                    current = max(6.0, current - drop)
                    brake_steps.append(len(speeds))
                    next_brake = brake_marks.pop(0) if brake_marks else None
                    cooldown = 4
                elif current < cruise:
                    current = min(cruise, current + accel_step)
                elif current > cruise:
                    current = max(cruise, current - decel_step)
                speeds.append(current)
                headings.append(heading)
                covered += current / 3600.0 * step
                if cooldown:
                    cooldown -= 1
                if len(speeds) > 86400:  # hard stop: one day of driving
                    break
        # Come to a stop without tripping the brake detector.
        while current > 12.0:
            current = max(10.0, current - decel_step)
            heading = (heading + drift.next()) % 360.0
            speeds.append(current)
            headings.append(heading)
            covered += current / 3600.0 * step

        speeds_arr = np.asarray(speeds)
        headings_arr = np.asarray(headings)
        step_km = speeds_arr / 3600.0 * step
        lats, lons = step_positions(origin.lat, origin.lon, step_km, headings_arr)
        # A scripted brake at low-step index b decelerates across the
        # boundary between segments b-1 and b, i.e. the instant step*b.
        brake_times = [start + dt.timedelta(seconds=step * i) for i in brake_steps]
        return Trip(
            start=start,
            step_s=step,
            lats=lats,
            lons=lons,
            speeds_kmh=speeds_arr,
            headings_deg=headings_arr,
            distance_km=float(np.sum(step_km)),
            night_km=night_share_of_steps(start, step, step_km, self.tz),
            harsh_brake_count=len(brake_times),
            brake_times=brake_times,
        )

    def _bearing_to_home(self, position: GpsPoint) -> float:
        dlat = self.home.lat - position.lat
        dlon = (self.home.lon - position.lon) * math.cos(math.radians(position.lat))
        if abs(dlat) < 1e-9 and abs(dlon) < 1e-9:
            return 0.0
        return math.degrees(math.atan2(dlon, dlat)) % 360.0


def trips_to_jsonl(trips: Iterable[Trip]) -> list[str]:
    """One trip per line, canonical field order via sorted keys."""
    import json

    return [json.dumps(t.to_json_dict(), sort_keys=True, separators=(",", ":")) for t in trips]


def trips_from_jsonl(lines: Iterable[str]) -> list[Trip]:
    import json

    return [Trip.from_json_dict(json.loads(line)) for line in lines if line.strip()]
