"""Request-budget primitives operating on simulated time.

Two shapes of upstream quota exist: a rolling window (e.g. 50 requests
per minute) and a fixed per-day budget that resets at the vehicle's local
midnight (e.g. odometer twice a day). Both are implemented against
explicit `now` datetimes so they behave identically under the simulated
clock and a wall clock.
"""

from __future__ import annotations

import datetime as dt
from collections import deque
from typing import Optional
from zoneinfo import ZoneInfo

from .domain import QuotaMode, RequestQuota
from .timebase import DEFAULT_TZ, local_midnight


class SlidingWindowLimiter:
    """Allows at most `max_requests` in any window of `window_s` seconds."""

    def __init__(self, max_requests: int, window_s: float) -> None:
        if max_requests < 1 or window_s <= 0:
            raise ValueError("limiter needs max_requests >= 1 and window_s > 0")
        self.max_requests = max_requests
        self.window = dt.timedelta(seconds=window_s)
        self._grants: deque[dt.datetime] = deque()

    def _evict(self, now: dt.datetime) -> None:
        cutoff = now - self.window
        while self._grants and self._grants[0] <= cutoff:
            self._grants.popleft()

    def would_allow(self, now: dt.datetime) -> bool:
        self._evict(now)
        return len(self._grants) < self.max_requests

    def try_acquire(self, now: dt.datetime) -> bool:
        if self._grants and now < self._grants[-1]:
            raise ValueError("limiter observed time going backwards")
        self._evict(now)
        if len(self._grants) >= self.max_requests:
            return False
        self._grants.append(now)
        return True

    def next_free(self, now: dt.datetime) -> dt.datetime:
        """Earliest instant at which a permit becomes available again."""
        self._evict(now)
        if len(self._grants) < self.max_requests:
            return now
        # The oldest grant must age out of the window; add a tiny margin so
        # the permit is strictly free at the returned instant.
        return self._grants[0] + self.window + dt.timedelta(milliseconds=1)

    def refund(self, now: dt.datetime) -> None:
        """Give back the newest grant (the upstream never counted the call)."""
        self._evict(now)
        if self._grants:
            self._grants.pop()


class DailySlotBudget:
    """At most `max_per_day` grants per local calendar day."""

    def __init__(self, max_per_day: int, tz: ZoneInfo = DEFAULT_TZ) -> None:
        if max_per_day < 1:
            raise ValueError("daily budget needs max_per_day >= 1")
        self.max_per_day = max_per_day
        self.tz = tz
        self._day_start: Optional[dt.datetime] = None
        self._used = 0

    def _roll(self, now: dt.datetime) -> None:
        day_start = local_midnight(now, self.tz)
        if self._day_start != day_start:
            self._day_start = day_start
            self._used = 0

    def would_allow(self, now: dt.datetime) -> bool:
        self._roll(now)
        return self._used < self.max_per_day

    def try_acquire(self, now: dt.datetime) -> bool:
        self._roll(now)
        if self._used >= self.max_per_day:
            return False
        self._used += 1
        return True

    def next_free(self, now: dt.datetime) -> dt.datetime:
        self._roll(now)
        if self._used < self.max_per_day:
            return now
        assert self._day_start is not None
        local = self._day_start.astimezone(self.tz)
        next_day = (local + dt.timedelta(days=1, hours=12)).replace(
            hour=0, minute=0, second=0, microsecond=0
        )
        return next_day.astimezone(dt.timezone.utc)

    def refund(self, now: dt.datetime) -> None:
        self._roll(now)
        if self._used > 0:
            self._used -= 1


def limiter_for_quota(quota: RequestQuota, tz: ZoneInfo = DEFAULT_TZ, capacity_factor: float = 1.0):
    """Build the matching limiter for a profile quota.

    `capacity_factor` shrinks a sliding window's budget (the platform
    mirrors upstream limits at 90% to absorb clock skew); daily slot
    budgets are small and schedule-aligned, so they are never shrunk.
    """
    if quota.mode is QuotaMode.DAILY_SLOTS:
        return DailySlotBudget(quota.max_requests, tz)
    shrunk = max(1, int(quota.max_requests * capacity_factor))
    return SlidingWindowLimiter(shrunk, quota.window_s)
