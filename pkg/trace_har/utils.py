#!/usr/bin/env python3
"""
Common utilities shared across the pipeline: time arithmetic and
stage timing
"""
import functools
import logging
import time
from datetime import datetime, timedelta
from typing import Callable, Iterable, List, Tuple

import pandas as pd

logger = logging.getLogger(__name__)

Span = Tuple[datetime, datetime]


class TimeUtils:
    """Timestamp parsing and unit-grid arithmetic"""

    @staticmethod
    def parse_timestamp(text: str) -> datetime:
        """ISO-8601 local time, `T` or space separated, as a naive datetime.

        Sub-microsecond digits round to the nearest microsecond.
        """
        try:
            stamp = pd.to_datetime(text.strip(), format="ISO8601")
        except (ValueError, TypeError) as e:
            raise ValueError(f"unparseable timestamp '{text}'") from e
        if pd.isna(stamp) or stamp.tzinfo is not None:
            raise ValueError(f"unparseable timestamp '{text}'")
        return stamp.round("us").to_pydatetime()

    @staticmethod
    def parse_date_time(date_text: str, time_text: str) -> datetime:
        return TimeUtils.parse_timestamp(f"{date_text} {time_text}")

    @staticmethod
    def unit_delta(unit_seconds: float) -> timedelta:
        return timedelta(seconds=unit_seconds)

    @staticmethod
    def floor_to_unit(ts: datetime, unit: timedelta) -> datetime:
        """Floor relative to local midnight"""
        midnight = ts.replace(hour=0, minute=0, second=0, microsecond=0)
        offset = (ts - midnight) // timedelta(microseconds=1)
        unit_us = unit // timedelta(microseconds=1)
        return midnight + timedelta(microseconds=offset - offset % unit_us)

    @staticmethod
    def ceil_to_unit(ts: datetime, unit: timedelta) -> datetime:
        floored = TimeUtils.floor_to_unit(ts, unit)
        return floored if floored == ts else floored + unit

    @staticmethod
    def union_length(intervals: Iterable[Span]) -> timedelta:
        total = timedelta(0)
        current_start = current_end = None
        for start, end in sorted(intervals):
            if end <= start:
                continue
            if current_end is None or start > current_end:
                if current_end is not None:
                    total += current_end - current_start
                current_start, current_end = start, end
            else:
                current_end = max(current_end, end)
        if current_end is not None:
            total += current_end - current_start
        return total

    @staticmethod
    def clip(intervals: Iterable[Span], start: datetime, end: datetime) -> List[Span]:
        clipped = []
        for a, b in intervals:
            lo, hi = max(a, start), min(b, end)
            if hi > lo:
                clipped.append((lo, hi))
        return clipped


class TimingLogger:
    """Timing and logging utilities"""

    @staticmethod
    def log_execution_time(func: Callable) -> Callable:
        """Decorator to log function execution time"""
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.time()
            try:
                return func(*args, **kwargs)
            finally:
                elapsed = time.time() - start_time
                logger.info(f"{func.__name__} completed in {elapsed:.3f}s")
        return wrapper
