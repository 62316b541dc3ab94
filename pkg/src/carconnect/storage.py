"""Dual persistence: a static store and an append-only series store.

The static side holds drivers, vehicles, consents and eligibility
outcomes. The dynamic side is a time-series log of telemetry samples and
notification events. Both are defined as narrow ports with an in-memory
engine for tests and a file-backed engine (JSON-lines write-ahead
segments with compaction) for actual runs.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import datetime as dt

from .domain import (
    CarConnectError,
    DataPointKind,
    NotificationEvent,
    NotificationKind,
    ProfileRegistry,
    TelemetrySample,
    UnknownBrand,
    Vehicle,
    Vin,
    canonical_json,
    parse_rfc3339,
    rfc3339,
)

logger = logging.getLogger(__name__)


class DuplicatePoint(CarConnectError):
    """Sample with an identical (vin, kind, timestamp, source) key already stored."""


class OdometerRegression(CarConnectError):
    """Odometer write would break per-VIN monotonicity over observed time."""


@dataclass(frozen=True)
class RejectedSample:
    sample: TelemetrySample
    reason: str  # "duplicate_point" | "odometer_regression"


@dataclass
class AppendResult:
    """Per-batch outcome: how many rows landed, and which were rejected."""

    written: int = 0
    rejected: list[RejectedSample] = field(default_factory=list)

    def reasons(self) -> list[str]:
        return [r.reason for r in self.rejected]


def _ts_ms(ts: dt.datetime) -> int:
    return int(ts.timestamp() * 1000)


class SeriesStore:
    """Append-only store of telemetry samples and notification events.

    Point identity is (vin, kind, timestamp, source) for samples and
    delivery_id for events; appends are idempotent on exact duplicates.
    Queries always return points sorted by timestamp.
    """

    def __init__(self) -> None:
        # (vin, kind) -> sorted list of (ts_ms, source) keys + key -> sample map
        self._keys: dict[tuple[str, str], list[tuple[int, str]]] = {}
        self._samples: dict[tuple[str, str], dict[tuple[int, str], TelemetrySample]] = {}
        # per-vin odometer index for monotonicity checks: sorted (ts_ms, value)
        self._odometer: dict[str, list[tuple[int, float]]] = {}
        self._events: dict[str, NotificationEvent] = {}
        self._events_by_vin: dict[str, list[tuple[int, str]]] = {}
        self._persist_enabled = True

    # -- appends -----------------------------------------------------------

    def append_samples(self, samples: Iterable[TelemetrySample]) -> AppendResult:
        result = AppendResult()
        for sample in samples:
            reason = self._try_append(sample)
            if reason is None:
                result.written += 1
            else:
                result.rejected.append(RejectedSample(sample, reason))
        return result

    def _try_append(self, sample: TelemetrySample) -> Optional[str]:
        series = (sample.vin.value, sample.kind.value)
        key = (_ts_ms(sample.observed_at), sample.source.value)
        existing = self._samples.setdefault(series, {})
        if key in existing:
            return "duplicate_point"
        if sample.kind is DataPointKind.ODOMETER:
            if not self._odometer_fits(sample.vin.value, key[0], float(sample.value)):
                return "odometer_regression"
        existing[key] = sample
        bisect.insort(self._keys.setdefault(series, []), key)
        if sample.kind is DataPointKind.ODOMETER:
            bisect.insort(self._odometer.setdefault(sample.vin.value, []), (key[0], float(sample.value)))
        if self._persist_enabled:
            self._persist_sample(sample)
        return None

    def _odometer_fits(self, vin: str, ts_ms: int, value: float) -> bool:
        # Non-decreasing over observed_at, checked against both neighbors so
        # out-of-order appends cannot smuggle in a regression.
        index = self._odometer.get(vin, [])
        pos = bisect.bisect_left(index, (ts_ms, float("-inf")))
        if pos > 0 and value < index[pos - 1][1]:
            return False
        if pos < len(index) and value > index[pos][1]:
            return False
        return True

    def append_events(self, events: Iterable[NotificationEvent]) -> int:
        written = 0
        for event in events:
            if event.delivery_id in self._events:
                continue
            self._events[event.delivery_id] = event
            bisect.insort(
                self._events_by_vin.setdefault(event.vin.value, []),
                (_ts_ms(event.emitted_at), event.delivery_id),
            )
            if self._persist_enabled:
                self._persist_event(event)
            written += 1
        return written

    # -- persistence hooks (no-ops for the in-memory engine) ----------------

    def _persist_sample(self, sample: TelemetrySample) -> None:
        pass

    def _persist_event(self, event: NotificationEvent) -> None:
        pass

    # -- queries -------------------------------------------------------------

    def query_series(
        self,
        vin: Vin | str,
        kind: DataPointKind,
        start: Optional[dt.datetime] = None,
        end: Optional[dt.datetime] = None,
        downsample_s: Optional[float] = None,
    ) -> list[TelemetrySample]:
        """Points of one (vin, kind) series, ascending in time.

        `downsample_s` keeps the last value per bucket of that width,
        which is what the dashboard charts consume.
        """
        vin_str = vin.value if isinstance(vin, Vin) else vin
        series = (vin_str, kind.value)
        keys = self._keys.get(series, [])
        lo = 0 if start is None else bisect.bisect_left(keys, (_ts_ms(start), ""))
        hi = len(keys) if end is None else bisect.bisect_right(keys, (_ts_ms(end), "\xff"))
        samples = [self._samples[series][k] for k in keys[lo:hi]]
        if downsample_s is None or not samples:
            return samples
        bucket_ms = int(downsample_s * 1000)
        kept: dict[int, TelemetrySample] = {}
        for sample in samples:
            kept[_ts_ms(sample.observed_at) // bucket_ms] = sample
        return [kept[b] for b in sorted(kept)]

    def query_events(
        self,
        vin: Vin | str,
        kinds: Optional[set[NotificationKind]] = None,
        start: Optional[dt.datetime] = None,
        end: Optional[dt.datetime] = None,
    ) -> list[NotificationEvent]:
        vin_str = vin.value if isinstance(vin, Vin) else vin
        rows = self._events_by_vin.get(vin_str, [])
        lo = 0 if start is None else bisect.bisect_left(rows, (_ts_ms(start), ""))
        hi = len(rows) if end is None else bisect.bisect_right(rows, (_ts_ms(end), "\xff"))
        events = [self._events[did] for _, did in rows[lo:hi]]
        if kinds is not None:
            events = [e for e in events if e.kind in kinds]
        return events

    def last_known(self, vin: Vin | str, kinds: Iterable[DataPointKind]) -> dict[DataPointKind, TelemetrySample]:
        """Most recent sample per requested kind; kinds never collected are absent."""
        vin_str = vin.value if isinstance(vin, Vin) else vin
        out: dict[DataPointKind, TelemetrySample] = {}
        for kind in kinds:
            keys = self._keys.get((vin_str, kind.value), [])
            if keys:
                out[kind] = self._samples[(vin_str, kind.value)][keys[-1]]
        return out

    def vins(self) -> list[str]:
        seen = {vin for (vin, _kind), keys in self._keys.items() if keys}
        seen.update(vin for vin, rows in self._events_by_vin.items() if rows)
        return sorted(seen)

    def sample_count(self, vin: Optional[str] = None) -> int:
        if vin is None:
            return sum(len(v) for v in self._samples.values())
        return sum(len(v) for (s_vin, _), v in self._samples.items() if s_vin == vin)

    def event_count(self, vin: Optional[str] = None) -> int:
        if vin is None:
            return len(self._events)
        return len(self._events_by_vin.get(vin, []))

    # -- export / import -----------------------------------------------------

    def export_vin_lines(self, vin: str) -> list[str]:
        """Full dump of one VIN's dynamic data as canonical JSON lines.

        Row order is total (timestamp, row type, kind, source, delivery id),
        so equal stores always export byte-identical dumps.
        """
        rows: list[tuple[tuple, str]] = []
        for (s_vin, kind), samples in self._samples.items():
            if s_vin != vin:
                continue
            for (ts_ms, source), sample in samples.items():
                line = canonical_json({"row": "sample", "data": sample.to_json_dict()})
                rows.append(((ts_ms, 0, kind, source, ""), line))
        for ts_ms, delivery_id in self._events_by_vin.get(vin, []):
            event = self._events[delivery_id]
            line = canonical_json({"row": "event", "data": event.to_json_dict()})
            rows.append(((ts_ms, 1, event.kind.value, "", delivery_id), line))
        rows.sort(key=lambda item: item[0])
        return [line for _, line in rows]

    def import_lines(self, lines: Iterable[str]) -> tuple[int, int]:
        """Load an export dump; returns (samples_written, events_written)."""
        samples: list[TelemetrySample] = []
        events: list[NotificationEvent] = []
        for line in lines:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            if payload["row"] == "sample":
                samples.append(TelemetrySample.from_json_dict(payload["data"]))
            elif payload["row"] == "event":
                events.append(NotificationEvent.from_json_dict(payload["data"]))
            else:
                raise ValueError(f"unknown row type {payload['row']!r}")
        result = self.append_samples(samples)
        return result.written, self.append_events(events)


class FileSeriesStore(SeriesStore):
    """Series store persisted as JSON-lines write-ahead segments.

    Appends go to the active segment one line at a time, so an interrupted
    batch leaves a clean prefix (a torn trailing line is dropped during
    recovery). `compact()` folds all segments into one.
    """

    SEGMENT_LIMIT = 100_000  # lines per segment before rolling

    def __init__(self, root: Path | str) -> None:
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._segment_lines = 0
        self._segment_no = 0
        self._fh = None
        self._recover()
        self._open_segment()

    def _segments(self) -> list[Path]:
        return sorted(self.root.glob("series-*.jsonl"))

    def _recover(self) -> None:
        self._persist_enabled = False
        try:
            for segment in self._segments():
                raw = segment.read_bytes().decode("utf-8", errors="replace")
                for line in raw.split("\n"):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        payload = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("dropping torn line in %s", segment.name)
                        continue
                    if payload.get("row") == "sample":
                        self._try_append(TelemetrySample.from_json_dict(payload["data"]))
                    elif payload.get("row") == "event":
                        self.append_events([NotificationEvent.from_json_dict(payload["data"])])
                self._segment_no = max(self._segment_no, int(segment.stem.split("-")[1]))
        finally:
            self._persist_enabled = True

    def _open_segment(self) -> None:
        self._segment_no += 1
        path = self.root / f"series-{self._segment_no:05d}.jsonl"
        self._fh = path.open("a", encoding="utf-8")
        self._segment_lines = 0

    def _write_line(self, line: str) -> None:
        assert self._fh is not None
        self._fh.write(line + "\n")
        self._fh.flush()
        self._segment_lines += 1
        if self._segment_lines >= self.SEGMENT_LIMIT:
            self._fh.close()
            self._open_segment()

    def _persist_sample(self, sample: TelemetrySample) -> None:
        self._write_line(canonical_json({"row": "sample", "data": sample.to_json_dict()}))

    def _persist_event(self, event: NotificationEvent) -> None:
        self._write_line(canonical_json({"row": "event", "data": event.to_json_dict()}))

    def compact(self) -> None:
        """Rewrite all segments as one sorted segment."""
        if self._fh is not None:
            self._fh.close()
        old = self._segments()
        tmp = self.root / "series-compact.tmp"
        with tmp.open("w", encoding="utf-8") as fh:
            for vin in self.vins():
                for line in self.export_vin_lines(vin):
                    fh.write(line + "\n")
        for segment in old:
            segment.unlink()
        self._segment_no = 0
        tmp.rename(self.root / "series-00001.jsonl")
        self._segment_no = 1
        self._fh = (self.root / "series-00001.jsonl").open("a", encoding="utf-8")
        self._segment_lines = 0

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# Static store
# ---------------------------------------------------------------------------


class IntegrityError(CarConnectError):
    """Write would break static-store referential integrity."""


class StaticStore:
    """Keyed store for drivers, vehicles, consents and eligibility outcomes.

    Writes are serialized per key by construction (single-threaded engine);
    consents must reference an existing vehicle, and vehicles must carry a
    brand known to the profile registry when one is attached.
    """

    COLLECTIONS = ("drivers", "vehicles", "consents", "outcomes")

    def __init__(self, registry: Optional[ProfileRegistry] = None) -> None:
        self.registry = registry
        self._data: dict[str, dict[str, dict[str, Any]]] = {c: {} for c in self.COLLECTIONS}
        self._persist_enabled = True

    # -- typed accessors -----------------------------------------------------

    def put_driver(self, email: str, payload: Mapping[str, Any]) -> None:
        self._put("drivers", email, dict(payload))

    def get_driver(self, email: str) -> Optional[dict[str, Any]]:
        return self._data["drivers"].get(email)

    def put_vehicle(self, vehicle: Vehicle) -> None:
        if self.registry is not None and vehicle.brand not in self.registry:
            raise UnknownBrand(f"vehicle {vehicle.vin} has unregistered brand {vehicle.brand!r}")
        self._put("vehicles", vehicle.vin.value, vehicle.to_json_dict())

    def get_vehicle(self, vin: Vin | str) -> Optional[Vehicle]:
        key = vin.value if isinstance(vin, Vin) else vin
        payload = self._data["vehicles"].get(key)
        return Vehicle.from_json_dict(payload) if payload else None

    def vehicles(self) -> list[Vehicle]:
        return [Vehicle.from_json_dict(p) for _, p in sorted(self._data["vehicles"].items())]

    def put_consent(self, payload: Mapping[str, Any]) -> None:
        vin = payload["vin"]
        if vin not in self._data["vehicles"]:
            raise IntegrityError(f"consent references unknown vehicle {vin}")
        self._put("consents", vin, dict(payload))

    def get_consent(self, vin: Vin | str) -> Optional[dict[str, Any]]:
        key = vin.value if isinstance(vin, Vin) else vin
        return self._data["consents"].get(key)

    def consents(self) -> list[dict[str, Any]]:
        return [dict(p) for _, p in sorted(self._data["consents"].items())]

    def put_outcome(self, payload: Mapping[str, Any]) -> None:
        self._put("outcomes", payload["vin"], dict(payload))

    def get_outcome(self, vin: Vin | str) -> Optional[dict[str, Any]]:
        key = vin.value if isinstance(vin, Vin) else vin
        return self._data["outcomes"].get(key)

    def outcomes(self) -> list[dict[str, Any]]:
        return [dict(p) for _, p in sorted(self._data["outcomes"].items())]

    def _put(self, collection: str, key: str, payload: dict[str, Any]) -> None:
        self._data[collection][key] = payload
        if self._persist_enabled:
            self._persist(collection, key, payload)

    def _persist(self, collection: str, key: str, payload: dict[str, Any]) -> None:
        pass

    # -- export ----------------------------------------------------------------

    def export_lines(self) -> list[str]:
        lines = []
        for collection in self.COLLECTIONS:
            for key in sorted(self._data[collection]):
                lines.append(
                    canonical_json(
                        {"collection": collection, "key": key, "data": self._data[collection][key]}
                    )
                )
        return lines

    def import_lines(self, lines: Iterable[str]) -> int:
        count = 0
        for line in lines:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            self._put(payload["collection"], payload["key"], payload["data"])
            count += 1
        return count


class FileStaticStore(StaticStore):
    """Static store journaled to a JSON-lines file (last write per key wins)."""

    def __init__(self, path: Path | str, registry: Optional[ProfileRegistry] = None) -> None:
        super().__init__(registry)
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                line = line.strip()
                if not line:
                    continue
                try:
                    payload = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("dropping torn line in %s", self.path.name)
                    continue
                self._data[payload["collection"]][payload["key"]] = payload["data"]
        self._fh = self.path.open("a", encoding="utf-8")

    def _persist(self, collection: str, key: str, payload: dict[str, Any]) -> None:
        self._fh.write(canonical_json({"collection": collection, "key": key, "data": payload}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
