import datetime as dt
import math

import pytest
from hypothesis import given, settings, strategies as st
from zoneinfo import ZoneInfo

from carconnect.analytics import (
    EmptyMap,
    NoDataForVin,
    NoDataInPeriod,
    NonPositivePremium,
    SpeedLimitMap,
    TrackPoint,
    UnorderedPoints,
    ZeroTimeDelta,
    build_risk_features,
    compute_distance,
    compute_overspeed,
    cost_viability,
    detect_harsh_brakes,
    estimate_speeds,
    night_day_split,
    segment_tracks,
    segment_trips,
    summarize_trip,
    theft_report,
    track_from_series,
)
from carconnect.domain import (
    DataPointKind,
    GpsPoint,
    NotificationEvent,
    NotificationKind,
    TelemetrySample,
    UTC,
    parse_vin,
)
from carconnect.fixtures import speed_limit_map
from carconnect.storage import SeriesStore
from carconnect.traces import TraceGenerator, TripModel, build_trip_from_legs

VIN = parse_vin("WBAXXXXXXXX123456")
T0 = dt.datetime(2022, 3, 1, 10, 0, tzinfo=UTC)
LUX = ZoneInfo("Europe/Luxembourg")


def pt(seconds: float, lat: float, lon: float) -> TrackPoint:
    return TrackPoint(ts=T0 + dt.timedelta(seconds=seconds), lat=lat, lon=lon)


class TestDistance:
    def test_identical_points_zero_km(self):
        assert compute_distance([pt(0, 49.6, 6.12), pt(10, 49.6, 6.12)]) == 0.0

    def test_meridian_arc_oracle(self):
        # 0.009 deg of latitude: R * radians(0.009) = 1.0007557 km
        distance = compute_distance([pt(0, 49.6000, 6.1200), pt(60, 49.6090, 6.1200)])
        assert distance == pytest.approx(1.0007557, abs=1e-4)

    def test_unordered_points_rejected(self):
        with pytest.raises(UnorderedPoints):
            compute_distance([pt(10, 49.6, 6.12), pt(0, 49.61, 6.12)])

    def test_generator_trip_recovered_within_one_percent(self):
        trips = TraceGenerator(TripModel(trips_per_day=2.0), GpsPoint(49.6, 6.12)).generate(
            dt.date(2022, 3, 1), 2, seed=4
        )
        for trip in trips:
            points = [
                TrackPoint(ts=t, lat=float(la), lon=float(lo))
                for t, la, lo in zip(trip.point_times(), trip.lats, trip.lons)
            ]
            assert compute_distance(points) == pytest.approx(trip.distance_km, rel=0.01)

    def test_distance_additivity(self):
        points = [pt(i * 10, 49.6 + i * 1e-4, 6.12 + i * 1e-4) for i in range(50)]
        whole = compute_distance(points)
        split = compute_distance(points[:20]) + compute_distance(points[19:])
        assert abs(whole - split) <= 1e-9 * max(whole, 1.0)


class TestSpeeds:
    def test_100m_in_10s_is_36_kmh(self):
        # 0.0009 deg lat ~ 100.0756 m
        segments = estimate_speeds([pt(0, 49.6000, 6.12), pt(10, 49.6009, 6.12)])
        assert segments[0].speed_kmh == pytest.approx(36.0, rel=1e-3)

    def test_stationary_pair_zero(self):
        segments = estimate_speeds([pt(0, 49.6, 6.12), pt(10, 49.6, 6.12)])
        assert segments[0].speed_kmh == 0.0

    def test_zero_time_delta_rejected(self):
        with pytest.raises(ZeroTimeDelta):
            estimate_speeds([pt(0, 49.6, 6.12), pt(0, 49.61, 6.12)])

    def test_idle_gaps_excluded(self):
        segments = estimate_speeds([pt(0, 49.6, 6.12), pt(10, 49.601, 6.12), pt(1000, 49.62, 6.12)])
        assert len(segments) == 1


def legs_trip(legs, start=T0):
    return build_trip_from_legs(start, GpsPoint(49.6000, 6.1200), legs)


def trip_points(trip):
    return [
        TrackPoint(ts=t, lat=float(la), lon=float(lo))
        for t, la, lo in zip(trip.point_times(), trip.lats, trip.lons)
    ]


class TestHarshBrakes:
    def test_sixty_to_twenty_over_two_seconds_is_one_event(self):
        # 40 km/h drop over 2 s = 5.56 m/s^2, above the 3.5 default
        trip = legs_trip([(60.0, 0.0, 20.0), (20.0, 0.0, 10.0)])
        events = detect_harsh_brakes(estimate_speeds(trip_points(trip)))
        assert len(events) == 1
        assert events[0].decel_mps2 == pytest.approx(5.5556, abs=1e-3)

    def test_constant_speed_no_events(self):
        trip = legs_trip([(60.0, 0.0, 60.0)])
        assert detect_harsh_brakes(estimate_speeds(trip_points(trip))) == []

    def test_gentle_slowdown_below_threshold(self):
        # 50 -> 40 km/h over 5 s = 0.56 m/s^2
        points = [pt(0, 49.6, 6.12)]
        lat = 49.6
        for i, speed in enumerate([50.0] * 4 + [40.0] * 4):
            lat += speed / 3600.0 * 5.0 / 111.195
            points.append(pt(5.0 * (i + 1), lat, 6.12))
        assert detect_harsh_brakes(estimate_speeds(points)) == []

    def test_adjacent_qualifying_boundaries_merge(self):
        # 100 -> 60 -> 25 km/h across consecutive 2 s steps: one maneuver
        trip = legs_trip([(100.0, 0.0, 10.0), (60.0, 0.0, 2.0), (25.0, 0.0, 10.0)])
        events = detect_harsh_brakes(estimate_speeds(trip_points(trip)))
        assert len(events) == 1

    def test_threshold_monotonicity(self):
        trips = TraceGenerator(
            TripModel(trips_per_day=3.0, harsh_brake_rate_per_100km=10.0), GpsPoint(49.6, 6.12)
        ).generate(dt.date(2022, 3, 1), 2, seed=6)
        for trip in trips:
            segments = estimate_speeds(trip_points(trip))
            counts = [len(detect_harsh_brakes(segments, threshold)) for threshold in (2.0, 3.5, 5.0, 7.0)]
            assert counts == sorted(counts, reverse=True)


class TestSegmentation:
    def test_two_clusters_split_by_gap(self):
        cluster1 = [pt(i * 30, 49.6 + i * 1e-3, 6.12) for i in range(5)]
        cluster2 = [pt(7200 + i * 30, 49.7 + i * 1e-3, 6.12) for i in range(5)]
        assert len(segment_tracks(cluster1 + cluster2)) == 2

    def test_single_point_no_trips(self):
        assert segment_tracks([pt(0, 49.6, 6.12)]) == []

    def test_short_displacement_discarded(self):
        crumbs = [pt(i * 30, 49.6 + i * 1e-6, 6.12) for i in range(4)]  # ~0.3 m total
        assert segment_tracks(crumbs) == []

    def test_stationary_gap_splits(self):
        # 200 s gap with 20 m displacement: a stop, hence a boundary
        a = [pt(i * 30, 49.6 + i * 1e-3, 6.12) for i in range(5)]
        b = [pt(4 * 30 + 200 + i * 30, 49.604 + 0.00018 + i * 1e-3, 6.12) for i in range(5)]
        assert len(segment_tracks(a + b)) == 2

    def test_dense_slow_driving_not_split(self):
        # 2 s cadence at walking pace: displacement per fix is tiny but the
        # stationary clause requires a sampling gap
        points = [pt(i * 2, 49.6 + i * 2e-5, 6.12) for i in range(300)]
        assert len(segment_tracks(points)) == 1

    def test_generator_trip_count_recovered(self):
        trips = TraceGenerator(TripModel(trips_per_day=3.0), GpsPoint(49.6, 6.12)).generate(
            dt.date(2022, 3, 1), 5, seed=8
        )
        points = [p for trip in trips for p in trip_points(trip)]
        assert len(segment_tracks(points)) == len(trips)


class TestNightSplit:
    def test_day_trip_zero_night(self):
        trip = legs_trip([(50.0, 90.0, 1800.0)], start=dt.datetime(2022, 3, 1, 11, 0, tzinfo=UTC))
        segments = estimate_speeds(trip_points(trip))
        night, day = night_day_split(segments, LUX)
        assert night == 0.0
        assert night + day == pytest.approx(trip.distance_km, rel=1e-6)

    def test_full_night_trip(self):
        trip = legs_trip([(50.0, 90.0, 1800.0)], start=dt.datetime(2022, 3, 2, 1, 30, tzinfo=UTC))
        segments = estimate_speeds(trip_points(trip))
        night, day = night_day_split(segments, LUX)
        assert night == pytest.approx(trip.distance_km, rel=1e-6)
        assert day == pytest.approx(0.0, abs=1e-9)

    def test_straddling_trip_splits_at_window_edge(self):
        # 21:30 -> 22:30 local at constant speed: half the distance is night
        trip = legs_trip([(50.0, 90.0, 3600.0)], start=dt.datetime(2022, 3, 1, 20, 30, tzinfo=UTC))
        segments = estimate_speeds(trip_points(trip))
        night, day = night_day_split(segments, LUX)
        assert night == pytest.approx(trip.distance_km / 2, rel=0.01)
        assert night + day == pytest.approx(trip.distance_km, rel=1e-9)

    def test_night_plus_day_equals_total_exactly(self):
        trips = TraceGenerator(TripModel(trips_per_day=3.0, night_trip_fraction=0.4), GpsPoint(49.6, 6.12)).generate(
            dt.date(2022, 3, 1), 3, seed=12
        )
        for trip in trips:
            segments = estimate_speeds(trip_points(trip))
            night, day = night_day_split(segments, LUX)
            total = sum(s.distance_km for s in segments)
            assert night + day == total  # exact complement by construction


class TestOverspeed:
    def test_scripted_overspeed_on_mapped_road(self):
        # 30 s at 60 km/h = 0.5 km on the 50 km/h road, then a compliant
        # control leg at 45 km/h on the same road
        trip = legs_trip([(60.0, 0.0, 30.0), (45.0, 0.0, 40.0)])
        result = compute_overspeed(estimate_speeds(trip_points(trip)), speed_limit_map())
        assert result.overspeed_km == pytest.approx(0.5, abs=0.05)
        assert result.uncovered_km == pytest.approx(0.0, abs=1e-6)

    def test_compliant_speed_counts_nothing(self):
        trip = legs_trip([(45.0, 0.0, 60.0)])
        result = compute_overspeed(estimate_speeds(trip_points(trip)), speed_limit_map())
        assert result.overspeed_km == 0.0

    def test_tolerance_absorbs_small_excess(self):
        trip = legs_trip([(52.0, 0.0, 60.0)])  # 2 km/h over, inside the 3 km/h tolerance
        result = compute_overspeed(estimate_speeds(trip_points(trip)), speed_limit_map())
        assert result.overspeed_km == 0.0

    def test_off_map_distance_is_uncovered(self):
        trip = build_trip_from_legs(T0, GpsPoint(48.0, 5.0), [(90.0, 0.0, 120.0)])
        result = compute_overspeed(estimate_speeds(trip_points(trip)), speed_limit_map())
        assert result.overspeed_km == 0.0
        assert result.uncovered_km == pytest.approx(trip.distance_km, rel=1e-6)

    def test_overspeed_bounded_by_matched_distance(self):
        trip = legs_trip([(60.0, 0.0, 30.0), (45.0, 0.0, 40.0)])
        segments = estimate_speeds(trip_points(trip))
        result = compute_overspeed(segments, speed_limit_map())
        total = sum(s.distance_km for s in segments)
        assert result.overspeed_km <= total - result.uncovered_km + 1e-9

    def test_empty_map_rejected(self):
        with pytest.raises(EmptyMap):
            compute_overspeed([], SpeedLimitMap([]))

    def test_map_text_format_parses(self):
        parsed = SpeedLimitMap.from_text("# comment\n50 urban 49.0,6.0 49.1,6.0\n")
        assert len(parsed.segments) == 1
        assert parsed.segments[0].limit_kmh == 50.0


class TestTripSummaries:
    def test_summary_fields_consistent(self):
        trip = legs_trip([(60.0, 0.0, 300.0)])
        summary = summarize_trip(VIN, trip_points(trip), speed_limit_map(), LUX)
        assert summary.distance_km == pytest.approx(5.0, rel=1e-6)
        assert summary.max_speed_kmh == pytest.approx(60.0, rel=1e-6)
        assert summary.mean_speed_kmh == pytest.approx(60.0, rel=1e-6)
        assert summary.point_count == 151
        assert 0.0 <= summary.night_km <= summary.distance_km
        assert 0.0 <= summary.overspeed_km <= summary.distance_km

    def test_segment_trips_from_store(self):
        store = SeriesStore()
        trips = TraceGenerator(TripModel(trips_per_day=3.0), GpsPoint(49.6, 6.12)).generate(
            dt.date(2022, 3, 1), 5, seed=13
        )
        samples = []
        for trip in trips:
            for ts, la, lo in zip(trip.point_times(), trip.lats, trip.lons):
                samples.append(
                    TelemetrySample(
                        vin=VIN, kind=DataPointKind.GPS_COORDINATES,
                        value=GpsPoint(float(la), float(lo)), observed_at=ts,
                    )
                )
        store.append_samples(samples)
        summaries = segment_trips(VIN, store)
        assert len(summaries) == len(trips)
        for summary, trip in zip(summaries, trips):
            assert summary.distance_km == pytest.approx(trip.distance_km, rel=0.01)


class TestRiskFeatures:
    def seeded_store(self, seed=14, days=5) -> tuple[SeriesStore, list]:
        store = SeriesStore()
        model = TripModel(trips_per_day=3.0, night_trip_fraction=0.3, harsh_brake_rate_per_100km=5.0)
        trips = TraceGenerator(model, GpsPoint(49.6, 6.12)).generate(dt.date(2022, 3, 1), days, seed=seed)
        samples = []
        for trip in trips:
            for ts, la, lo in zip(trip.point_times(), trip.lats, trip.lons):
                samples.append(
                    TelemetrySample(
                        vin=VIN, kind=DataPointKind.GPS_COORDINATES,
                        value=GpsPoint(float(la), float(lo)), observed_at=ts,
                    )
                )
        store.append_samples(samples)
        return store, trips

    def period(self):
        return (dt.datetime(2022, 2, 28, tzinfo=UTC), dt.datetime(2022, 3, 10, tzinfo=UTC))

    def test_feature_vector_matches_ground_truth(self):
        store, trips = self.seeded_store()
        start, end = self.period()
        vector = build_risk_features(VIN, store, start, end, speed_limit_map(), LUX)
        total = sum(t.distance_km for t in trips)
        night = sum(t.night_km for t in trips)
        brakes = sum(t.harsh_brake_count for t in trips)
        assert vector.total_km == pytest.approx(total, rel=0.01)
        assert vector.night_fraction == pytest.approx(night / total, abs=0.02)
        assert vector.harsh_brakes_per_100km == pytest.approx(brakes / total * 100.0, rel=0.05)

    def test_event_counts_flow_into_flags(self):
        store, _trips = self.seeded_store()
        start, end = self.period()
        store.append_events(
            [
                NotificationEvent(vin=VIN, kind=NotificationKind.ACCIDENT_REPORTED,
                                  emitted_at=start + dt.timedelta(days=1), delivery_id="a-1"),
                NotificationEvent(vin=VIN, kind=NotificationKind.BREAKDOWN_REPORTED,
                                  emitted_at=start + dt.timedelta(days=2), delivery_id="b-1"),
            ]
        )
        vector = build_risk_features(VIN, store, start, end, speed_limit_map(), LUX)
        assert vector.accident_count == 1
        assert vector.breakdown_count == 1
        assert vector.emergency_count == 0

    def test_no_trips_in_period(self):
        store, _ = self.seeded_store()
        with pytest.raises(NoDataInPeriod):
            build_risk_features(
                VIN, store, dt.datetime(2023, 1, 1, tzinfo=UTC), dt.datetime(2023, 2, 1, tzinfo=UTC)
            )


class TestCostViability:
    def test_published_rate_against_premium_base(self):
        verdict = cost_viability(6.5, 81.25)
        assert verdict.ratio == pytest.approx(0.080, abs=0.001)
        assert verdict.verdict == "high-value-only"

    def test_cheaper_odometer_tier(self):
        verdict = cost_viability(2.1, 81.25)
        assert verdict.ratio == pytest.approx(0.0258, abs=0.001)
        assert verdict.verdict == "viable"

    def test_luxury_premium_is_viable(self):
        verdict = cost_viability(6.5, 650.0)
        assert verdict.ratio == pytest.approx(0.01, abs=0.001)
        assert verdict.verdict == "viable"

    def test_non_positive_premium(self):
        with pytest.raises(NonPositivePremium):
            cost_viability(6.5, 0.0)


class TestTheftReport:
    def test_lock_state_and_last_trajectory(self):
        store = SeriesStore()
        trip = legs_trip([(50.0, 0.0, 600.0)])
        samples = [
            TelemetrySample(vin=VIN, kind=DataPointKind.GPS_COORDINATES,
                            value=GpsPoint(float(la), float(lo)), observed_at=ts)
            for ts, la, lo in zip(trip.point_times(), trip.lats, trip.lons)
        ]
        store.append_samples(samples)
        store.append_samples(
            [
                TelemetrySample(vin=VIN, kind=DataPointKind.DOORS_LOCK_STATE, value=True,
                                observed_at=trip.end + dt.timedelta(minutes=5))
            ]
        )
        report = theft_report(VIN, store)
        assert report.last_lock_state is True
        assert len(report.last_trajectory) == len(samples)
        assert report.last_seen_at == trip.end + dt.timedelta(minutes=5)

    def test_odometer_only_vehicle(self):
        store = SeriesStore()
        store.append_samples(
            [TelemetrySample(vin=VIN, kind=DataPointKind.ODOMETER, value=1000.0, observed_at=T0)]
        )
        report = theft_report(VIN, store)
        assert report.last_lock_state is None
        assert report.last_trajectory == []
        assert report.last_seen_at == T0

    def test_unknown_vin(self):
        with pytest.raises(NoDataForVin):
            theft_report(VIN, SeriesStore())


@given(st.integers(0, 10_000), st.integers(1, 400))
@settings(deadline=None, max_examples=50)
def test_overspeed_never_exceeds_covered_distance(seed, n_points):
    """Random walks: overspeed_km <= distance - uncovered_km always holds."""
    import random as _random

    rng = _random.Random(seed)
    points = []
    lat, lon = 49.6, 6.12
    for i in range(n_points):
        lat += rng.uniform(-1e-4, 3e-4)
        lon += rng.uniform(-1e-4, 1e-4)
        points.append(pt(i * 10, lat, lon))
    segments = estimate_speeds(points)
    result = compute_overspeed(segments, speed_limit_map())
    total = sum(s.distance_km for s in segments)
    assert result.overspeed_km <= total - result.uncovered_km + 1e-9
