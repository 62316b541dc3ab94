"""Simulated time: injectable clock, event engine and local-time helpers.

Multi-day collection runs compress to milliseconds by advancing a
simulated clock through a deterministic event queue instead of sleeping.
Every component takes a clock so tests and production wiring share code.
"""

from __future__ import annotations

import datetime as dt
import heapq
from dataclasses import dataclass, field
from typing import Callable, Optional
from zoneinfo import ZoneInfo

from .domain import UTC

DEFAULT_TZ = ZoneInfo("Europe/Luxembourg")


class SimClock:
    """Manually advanced clock. `now()` is stable until someone advances it."""

    def __init__(self, start: dt.datetime) -> None:
        if start.tzinfo is None:
            raise ValueError("clock start must be timezone-aware")
        self._now = start.astimezone(UTC)

    def now(self) -> dt.datetime:
        return self._now

    def advance(self, seconds: float) -> dt.datetime:
        if seconds < 0:
            raise ValueError("cannot advance backwards")
        self._now += dt.timedelta(seconds=seconds)
        return self._now

    def advance_to(self, target: dt.datetime) -> dt.datetime:
        target = target.astimezone(UTC)
        if target < self._now:
            raise ValueError(f"cannot move clock backwards to {target}")
        self._now = target
        return self._now


@dataclass(order=True)
class _ScheduledEvent:
    when: dt.datetime
    seq: int
    callback: Callable[[], None] = field(compare=False)
    label: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)


class EventHandle:
    """Grip on a scheduled event, allowing lazy cancellation."""

    def __init__(self, event: _ScheduledEvent) -> None:
        self._event = event

    def cancel(self) -> None:
        self._event.cancelled = True

    @property
    def when(self) -> dt.datetime:
        return self._event.when


class EventEngine:
    """Deterministic discrete-event loop over a SimClock.

    Events fire in (time, insertion order); callbacks may schedule further
    events. One callback invocation is the platform's "scheduler tick".
    """

    def __init__(self, clock: SimClock) -> None:
        self.clock = clock
        self._heap: list[_ScheduledEvent] = []
        self._seq = 0
        self.ticks = 0

    def schedule_at(self, when: dt.datetime, callback: Callable[[], None], label: str = "") -> EventHandle:
        when = when.astimezone(UTC)
        if when < self.clock.now():
            raise ValueError(f"cannot schedule in the past: {when} < {self.clock.now()}")
        event = _ScheduledEvent(when=when, seq=self._seq, callback=callback, label=label)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return EventHandle(event)

    def schedule_in(self, seconds: float, callback: Callable[[], None], label: str = "") -> EventHandle:
        return self.schedule_at(self.clock.now() + dt.timedelta(seconds=seconds), callback, label)

    def run_until(self, end: dt.datetime) -> int:
        """Process every event due up to and including `end`; returns tick count."""
        end = end.astimezone(UTC)
        fired = 0
        while self._heap and self._heap[0].when <= end:
            event = heapq.heappop(self._heap)
            if event.cancelled:
                continue
            # A callback may itself advance the clock (e.g. a timed consent
            # step); events it overtakes then fire late rather than crash.
            self.clock.advance_to(max(event.when, self.clock.now()))
            event.callback()
            self.ticks += 1
            fired += 1
        self.clock.advance_to(max(end, self.clock.now()))
        return fired

    def run_for(self, seconds: float) -> int:
        return self.run_until(self.clock.now() + dt.timedelta(seconds=seconds))

    def pending(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)


# ---------------------------------------------------------------------------
# Vehicle-local time helpers
# ---------------------------------------------------------------------------


def to_local(ts: dt.datetime, tz: ZoneInfo = DEFAULT_TZ) -> dt.datetime:
    return ts.astimezone(tz)


def next_local_time(after: dt.datetime, hour: int, minute: int = 0, tz: ZoneInfo = DEFAULT_TZ) -> dt.datetime:
    """First instant strictly after `after` whose local wall time is hour:minute."""
    local = after.astimezone(tz)
    candidate = local.replace(hour=hour, minute=minute, second=0, microsecond=0)
    while candidate <= local:
        candidate = (candidate + dt.timedelta(days=1)).replace(hour=hour, minute=minute, second=0, microsecond=0)
    return candidate.astimezone(UTC)


def local_midnight(ts: dt.datetime, tz: ZoneInfo = DEFAULT_TZ) -> dt.datetime:
    """Local midnight of the day containing `ts`, as a UTC instant."""
    local = ts.astimezone(tz)
    return local.replace(hour=0, minute=0, second=0, microsecond=0).astimezone(UTC)


def in_window(ts: dt.datetime, start_hour: int, end_hour: int, tz: ZoneInfo = DEFAULT_TZ) -> bool:
    """True if local wall time falls in [start_hour:00, end_hour:00).

    Windows may wrap midnight (e.g. 22 -> 5 covers 22:00..04:59).
    """
    local = ts.astimezone(tz)
    minutes = local.hour * 60 + local.minute + local.second / 60.0 + local.microsecond / 6e7
    start = start_hour * 60
    end = end_hour * 60
    if start <= end:
        return start <= minutes < end
    return minutes >= start or minutes < end


def is_business_day(ts: dt.datetime, tz: ZoneInfo = DEFAULT_TZ) -> bool:
    return ts.astimezone(tz).weekday() < 5


def add_business_days(start: dt.datetime, days: int, tz: ZoneInfo = DEFAULT_TZ) -> dt.datetime:
    """`days` business days after `start`, same wall-clock time."""
    current = start.astimezone(tz)
    remaining = days
    while remaining > 0:
        current += dt.timedelta(days=1)
        if current.weekday() < 5:
            remaining -= 1
    return current.astimezone(UTC)
