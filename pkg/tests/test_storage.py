import datetime as dt
import json

import pytest

from carconnect.domain import (
    DataPointKind,
    GpsPoint,
    NotificationEvent,
    NotificationKind,
    SampleSource,
    TelemetrySample,
    UTC,
    Vehicle,
    parse_vin,
)
from carconnect.storage import FileSeriesStore, FileStaticStore, SeriesStore, StaticStore

VIN = parse_vin("WBAXXXXXXXX123456")
T0 = dt.datetime(2022, 2, 1, 8, 0, tzinfo=UTC)


def odo(km: float, minute: int) -> TelemetrySample:
    return TelemetrySample(
        vin=VIN, kind=DataPointKind.ODOMETER, value=km, observed_at=T0 + dt.timedelta(minutes=minute)
    )


def fuel(liters: float, minute: int) -> TelemetrySample:
    return TelemetrySample(
        vin=VIN, kind=DataPointKind.FUEL_VOLUME, value=liters, observed_at=T0 + dt.timedelta(minutes=minute)
    )


class TestAppend:
    def test_fresh_batch_written(self):
        store = SeriesStore()
        result = store.append_samples([odo(100, 0), odo(101, 1), fuel(40, 0)])
        assert result.written == 3 and not result.rejected

    def test_exact_duplicates_are_idempotent(self):
        store = SeriesStore()
        batch = [odo(100, 0), odo(101, 1), fuel(40, 0)]
        assert store.append_samples(batch).written == 3
        second = store.append_samples(batch)
        assert second.written == 0
        assert second.reasons() == ["duplicate_point"] * 3
        assert store.sample_count() == 3

    def test_odometer_regression_rejected_per_sample(self):
        store = SeriesStore()
        store.append_samples([odo(40_000, 0)])
        result = store.append_samples([odo(39_990, 5), fuel(38, 5)])
        assert result.written == 1
        assert result.reasons() == ["odometer_regression"]
        assert store.query_series(VIN, DataPointKind.FUEL_VOLUME)[-1].value == 38

    def test_out_of_order_insert_cannot_break_monotonicity(self):
        store = SeriesStore()
        store.append_samples([odo(100, 0), odo(200, 10)])
        # 150 km at minute 5 fits between its neighbors; 90 does not
        assert store.append_samples([odo(150, 5)]).written == 1
        assert store.append_samples([odo(90, 7)]).reasons() == ["odometer_regression"]
        values = [s.value for s in store.query_series(VIN, DataPointKind.ODOMETER)]
        assert values == sorted(values)


class TestQueries:
    def test_query_sorted_and_range_filtered(self):
        store = SeriesStore()
        store.append_samples([fuel(40, 10), fuel(41, 0), fuel(39, 20)])
        samples = store.query_series(VIN, DataPointKind.FUEL_VOLUME)
        assert [s.value for s in samples] == [41, 40, 39]
        window = store.query_series(
            VIN, DataPointKind.FUEL_VOLUME, T0 + dt.timedelta(minutes=5), T0 + dt.timedelta(minutes=15)
        )
        assert [s.value for s in window] == [40]

    def test_empty_range_gives_empty_list(self):
        store = SeriesStore()
        assert store.query_series(VIN, DataPointKind.ODOMETER) == []

    def test_downsample_keeps_last_value_per_bucket(self):
        store = SeriesStore()
        # one sample per second for 3 minutes
        samples = [
            TelemetrySample(
                vin=VIN,
                kind=DataPointKind.FUEL_VOLUME,
                value=50.0 - i * 0.01,
                observed_at=T0 + dt.timedelta(seconds=i),
            )
            for i in range(180)
        ]
        store.append_samples(samples)
        downsampled = store.query_series(VIN, DataPointKind.FUEL_VOLUME, downsample_s=60.0)
        # independent oracle: brute-force bucket -> last value
        buckets: dict[int, TelemetrySample] = {}
        for s in samples:
            buckets[int(s.observed_at.timestamp() * 1000) // 60000] = s
        expected = [buckets[b].value for b in sorted(buckets)]
        assert [s.value for s in downsampled] == expected
        assert len(downsampled) <= 3

    def test_last_known_per_kind(self):
        store = SeriesStore()
        store.append_samples([odo(100, 0), odo(150, 30), fuel(40, 10)])
        last = store.last_known(VIN, [DataPointKind.ODOMETER, DataPointKind.FUEL_VOLUME, DataPointKind.HEADING])
        assert last[DataPointKind.ODOMETER].value == 150
        assert last[DataPointKind.FUEL_VOLUME].value == 40
        assert DataPointKind.HEADING not in last


class TestEvents:
    def test_events_deduplicate_on_delivery_id(self):
        store = SeriesStore()
        event = NotificationEvent(vin=VIN, kind=NotificationKind.ACCIDENT_REPORTED, emitted_at=T0, delivery_id="d-1")
        assert store.append_events([event]) == 1
        assert store.append_events([event]) == 0
        assert store.event_count() == 1


class TestExportImport:
    def test_round_trip_preserves_queries(self):
        store = SeriesStore()
        store.append_samples([odo(100, 0), odo(110, 60), fuel(42, 5)])
        store.append_events(
            [NotificationEvent(vin=VIN, kind=NotificationKind.BATTERY_WARNING, emitted_at=T0, delivery_id="d-2")]
        )
        lines = store.export_vin_lines(VIN.value)
        restored = SeriesStore()
        written, events = restored.import_lines(lines)
        assert (written, events) == (3, 1)
        assert restored.export_vin_lines(VIN.value) == lines

    def test_export_is_deterministic_regardless_of_insert_order(self):
        a, b = SeriesStore(), SeriesStore()
        batch = [odo(100, 0), fuel(42, 0), odo(110, 60)]
        a.append_samples(batch)
        b.append_samples(list(reversed(batch)))
        assert a.export_vin_lines(VIN.value) == b.export_vin_lines(VIN.value)


class TestFileSeriesStore:
    def test_persistence_across_reopen(self, tmp_path):
        store = FileSeriesStore(tmp_path / "series")
        store.append_samples([odo(100, 0), fuel(40, 0)])
        store.close()
        reopened = FileSeriesStore(tmp_path / "series")
        assert reopened.sample_count() == 2
        assert reopened.query_series(VIN, DataPointKind.ODOMETER)[0].value == 100

    def test_torn_trailing_line_leaves_prefix(self, tmp_path):
        store = FileSeriesStore(tmp_path / "series")
        store.append_samples([odo(100, 0), odo(110, 1), odo(120, 2)])
        store.close()
        segment = next((tmp_path / "series").glob("series-*.jsonl"))
        raw = segment.read_bytes()
        segment.write_bytes(raw[: len(raw) - 25])  # tear the last record
        recovered = FileSeriesStore(tmp_path / "series")
        values = [s.value for s in recovered.query_series(VIN, DataPointKind.ODOMETER)]
        assert values == [100, 110]  # clean prefix, no torn point

    def test_duplicates_not_rewritten_on_replay(self, tmp_path):
        store = FileSeriesStore(tmp_path / "series")
        store.append_samples([odo(100, 0)])
        store.append_samples([odo(100, 0)])
        store.close()
        reopened = FileSeriesStore(tmp_path / "series")
        assert reopened.sample_count() == 1

    def test_compaction_preserves_content(self, tmp_path):
        store = FileSeriesStore(tmp_path / "series")
        store.append_samples([odo(100, 0), odo(110, 1), fuel(40, 0)])
        before = store.export_vin_lines(VIN.value)
        store.compact()
        assert store.export_vin_lines(VIN.value) == before
        assert len(list((tmp_path / "series").glob("series-*.jsonl"))) == 1
        recovered = FileSeriesStore(tmp_path / "series")
        assert recovered.export_vin_lines(VIN.value) == before


class TestStaticStore:
    def vehicle(self) -> Vehicle:
        return Vehicle(
            vin=VIN, brand="bmw-like", model="116d", production_year=2019, purchase_country="LU"
        )

    def test_consent_requires_vehicle(self):
        from carconnect.storage import IntegrityError

        store = StaticStore()
        with pytest.raises(IntegrityError):
            store.put_consent({"vin": VIN.value, "state": "active"})
        store.put_vehicle(self.vehicle())
        store.put_consent({"vin": VIN.value, "state": "active"})
        assert store.get_consent(VIN)["state"] == "active"

    def test_vehicle_brand_checked_against_registry(self):
        from carconnect.domain import ProfileRegistry, UnknownBrand

        store = StaticStore(ProfileRegistry.with_builtins())
        with pytest.raises(UnknownBrand):
            store.put_vehicle(
                Vehicle(vin=VIN, brand="acme", model="x", production_year=2020, purchase_country="LU")
            )

    def test_file_static_store_reload(self, tmp_path):
        store = FileStaticStore(tmp_path / "static.jsonl")
        store.put_vehicle(self.vehicle())
        store.put_driver("a@b.lu", {"email": "a@b.lu"})
        store.close()
        reopened = FileStaticStore(tmp_path / "static.jsonl")
        assert reopened.get_vehicle(VIN) == self.vehicle()
        assert reopened.get_driver("a@b.lu") == {"email": "a@b.lu"}

    def test_export_lines_sorted_and_typed(self):
        store = StaticStore()
        store.put_vehicle(self.vehicle())
        store.put_driver("a@b.lu", {"email": "a@b.lu"})
        lines = [json.loads(line) for line in store.export_lines()]
        assert [l["collection"] for l in lines] == ["drivers", "vehicles"]
