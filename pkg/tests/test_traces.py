import datetime as dt

import numpy as np
import pytest

from carconnect.domain import GpsPoint, UTC
from carconnect.geo import haversine_km, path_length_km
from carconnect.traces import (
    MIN_TRIP_GAP_S,
    SpeedProfile,
    TraceGenerator,
    Trip,
    TripModel,
    build_trip_from_legs,
    trips_from_jsonl,
    trips_to_jsonl,
)

HOME = GpsPoint(49.6116, 6.1319)
DAY0 = dt.date(2022, 3, 1)


def small_model(**overrides) -> TripModel:
    base = dict(
        trips_per_day=2.0,
        trip_length_km_mean=3.0,
        trip_length_km_spread=0.3,
        night_trip_fraction=0.2,
        harsh_brake_rate_per_100km=3.0,
    )
    base.update(overrides)
    return TripModel(**base)


class TestModelValidation:
    @pytest.mark.parametrize(
        "field,value",
        [
            ("trips_per_day", 0.0),
            ("trip_length_km_mean", -1.0),
            ("night_trip_fraction", 1.5),
            ("harsh_brake_rate_per_100km", -0.1),
            ("gps_emit_interval_s", 0.5),
        ],
    )
    def test_invalid_parameters_rejected(self, field, value):
        with pytest.raises(ValueError):
            small_model(**{field: value})

    def test_speed_profile_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SpeedProfile(urban_fraction=0.5, rural_fraction=0.5, highway_fraction=0.5)

    def test_model_round_trip(self):
        model = small_model()
        assert TripModel.from_json_dict(model.to_json_dict()) == model


class TestDeterminism:
    def test_same_seed_identical_traces(self):
        gen = TraceGenerator(small_model(), HOME)
        a = gen.generate(DAY0, 5, seed=42)
        b = gen.generate(DAY0, 5, seed=42)
        assert len(a) == len(b)
        for ta, tb in zip(a, b):
            assert ta.start == tb.start
            assert np.array_equal(ta.lats, tb.lats)
            assert np.array_equal(ta.speeds_kmh, tb.speeds_kmh)
            assert ta.brake_times == tb.brake_times

    def test_different_seeds_differ(self):
        gen = TraceGenerator(small_model(), HOME)
        a = gen.generate(DAY0, 5, seed=1)
        b = gen.generate(DAY0, 5, seed=2)
        assert [t.start for t in a] != [t.start for t in b]


class TestTripGeometry:
    def test_ground_truth_distance_matches_polyline(self):
        """The kinematic step-sum and the great-circle path length agree."""
        trips = TraceGenerator(small_model(), HOME).generate(DAY0, 3, seed=9)
        for trip in trips:
            measured = path_length_km(trip.lats, trip.lons)
            # flat-earth stepping vs great-circle reconstruction: ~1e-6 relative
            assert measured == pytest.approx(trip.distance_km, rel=1e-4)

    def test_headings_in_range(self):
        trips = TraceGenerator(small_model(), HOME).generate(DAY0, 3, seed=9)
        for trip in trips:
            assert np.all(trip.headings_deg >= 0.0) and np.all(trip.headings_deg < 360.0)

    def test_trips_do_not_overlap_and_keep_gap(self):
        trips = TraceGenerator(small_model(trips_per_day=5.0), HOME).generate(DAY0, 4, seed=3)
        for a, b in zip(trips, trips[1:]):
            assert (b.start - a.end).total_seconds() >= MIN_TRIP_GAP_S

    def test_scripted_brakes_are_detectable_drops(self):
        trips = TraceGenerator(small_model(harsh_brake_rate_per_100km=20.0), HOME).generate(DAY0, 3, seed=5)
        scripted = sum(t.harsh_brake_count for t in trips)
        assert scripted > 0
        for trip in trips:
            decels = (trip.speeds_kmh[:-1] - trip.speeds_kmh[1:]) / 3.6 / trip.step_s
            assert int(np.sum(decels >= 3.5)) == trip.harsh_brake_count

    def test_no_accidental_harsh_decelerations(self):
        trips = TraceGenerator(small_model(harsh_brake_rate_per_100km=0.0), HOME).generate(DAY0, 5, seed=7)
        for trip in trips:
            decels = (trip.speeds_kmh[:-1] - trip.speeds_kmh[1:]) / 3.6 / trip.step_s
            assert float(np.max(decels, initial=0.0)) < 3.5
            assert trip.harsh_brake_count == 0


class TestTripQueries:
    def trip(self) -> Trip:
        start = dt.datetime(2022, 3, 1, 10, 0, tzinfo=UTC)
        return build_trip_from_legs(start, HOME, [(60.0, 0.0, 600.0)])  # 10 min north at 60

    def test_distance_at_is_monotone(self):
        trip = self.trip()
        times = [trip.start + dt.timedelta(seconds=s) for s in (0, 100, 300, 599)]
        values = [trip.distance_at(t) for t in times]
        assert values == sorted(values)
        assert trip.distance_at(trip.end) == pytest.approx(trip.distance_km)

    def test_position_interpolates_along_path(self):
        trip = self.trip()
        mid = trip.position_at(trip.start + dt.timedelta(seconds=300))
        assert mid.lat == pytest.approx((trip.lats[0] + trip.lats[-1]) / 2, abs=1e-4)

    def test_speed_and_covers(self):
        trip = self.trip()
        assert trip.speed_at(trip.start) == 60.0
        assert trip.covers(trip.start)
        assert not trip.covers(trip.end)


class TestLegBuilder:
    def test_distance_is_speed_times_time(self):
        start = dt.datetime(2022, 3, 1, 10, 0, tzinfo=UTC)
        trip = build_trip_from_legs(start, HOME, [(60.0, 0.0, 30.0)])  # 0.5 km
        assert trip.distance_km == pytest.approx(0.5)

    def test_leg_to_leg_harsh_brake_recorded(self):
        start = dt.datetime(2022, 3, 1, 10, 0, tzinfo=UTC)
        trip = build_trip_from_legs(start, HOME, [(60.0, 0.0, 10.0), (20.0, 0.0, 10.0)])
        # 60->20 km/h across one 2 s step boundary: 5.56 m/s^2
        assert trip.harsh_brake_count == 1

    def test_gentle_slowdown_not_counted(self):
        start = dt.datetime(2022, 3, 1, 10, 0, tzinfo=UTC)
        trip = build_trip_from_legs(start, HOME, [(50.0, 0.0, 10.0), (40.0, 0.0, 10.0)])
        assert trip.harsh_brake_count == 0


class TestNightGroundTruth:
    def test_pure_night_trip(self):
        start = dt.datetime(2022, 3, 2, 1, 0, tzinfo=UTC)  # 02:00 local
        trip = build_trip_from_legs(start, HOME, [(50.0, 90.0, 1800.0)])
        assert trip.night_km == pytest.approx(trip.distance_km)

    def test_day_trip_has_zero_night(self):
        start = dt.datetime(2022, 3, 1, 11, 0, tzinfo=UTC)
        trip = build_trip_from_legs(start, HOME, [(50.0, 90.0, 1800.0)])
        assert trip.night_km == 0.0

    def test_boundary_trip_splits_about_evenly(self):
        # 21:30 -> 22:30 local; constant speed, so the night half is the
        # distance of steps whose midpoints pass 22:00
        start = dt.datetime(2022, 3, 1, 20, 30, tzinfo=UTC)
        trip = build_trip_from_legs(start, HOME, [(50.0, 90.0, 3600.0)])
        assert trip.night_km == pytest.approx(trip.distance_km / 2, rel=0.01)


class TestSerialization:
    def test_jsonl_round_trip(self):
        trips = TraceGenerator(small_model(), HOME).generate(DAY0, 2, seed=11)
        lines = trips_to_jsonl(trips)
        restored = trips_from_jsonl(lines)
        assert len(restored) == len(trips)
        for a, b in zip(trips, restored):
            assert a.start == b.start
            assert a.harsh_brake_count == b.harsh_brake_count
            assert b.distance_km == pytest.approx(a.distance_km)
            assert np.allclose(a.lats, b.lats, atol=1e-6)


def test_trip_count_monte_carlo_1000_seeds():
    """Two trips/day over 30 days: the realized count stays within [40, 80]
    for at least 95% of seeds (counts are Poisson around 60)."""
    model = small_model(trips_per_day=2.0, trip_length_km_mean=0.8, harsh_brake_rate_per_100km=0.0)
    gen = TraceGenerator(model, HOME)
    inside = 0
    for seed in range(1000):
        count = len(gen.generate(DAY0, 30, seed=seed))
        if 40 <= count <= 80:
            inside += 1
    assert inside >= 950
