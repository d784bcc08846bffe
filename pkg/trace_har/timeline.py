"""
Versioned segment store: a newer version owns any time it overlaps
"""
import bisect
import logging
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .errors import InvalidSegmentError, VersionConflictError
from .schemas import InsertReport, MaterializedInterval, VersionedSegment
from .utils import TimeUtils

logger = logging.getLogger(__name__)


class VersionedStore:
    """Ordered, non-overlapping interval map keyed by segment start"""

    def __init__(self, home_id: str = "", allowed_labels: Optional[Iterable[str]] = None):
        self.home_id = home_id
        self.allowed_labels = set(allowed_labels) if allowed_labels is not None else None
        self._segments: List[VersionedSegment] = []
        self._starts: List[datetime] = []

    def __len__(self) -> int:
        return len(self._segments)

    def snapshot(self) -> List[VersionedSegment]:
        return list(self._segments)

    def _overlapping(self, start: datetime, end: datetime) -> range:
        # stored segments are disjoint, so ends are sorted along with starts
        hi = bisect.bisect_left(self._starts, end)
        lo = hi
        while lo > 0 and self._segments[lo - 1].end > start:
            lo -= 1
        return range(lo, hi)

    def _validate(self, segments: Sequence[VersionedSegment]) -> List[VersionedSegment]:
        ordered = sorted(segments, key=lambda s: (s.start, s.end))
        for segment in ordered:
            if segment.end <= segment.start:
                raise InvalidSegmentError(f"segment {segment.start.isoformat()}-{segment.end.isoformat()} is empty or reversed")
            if self.allowed_labels is not None and segment.label not in self.allowed_labels:
                raise InvalidSegmentError(f"label '{segment.label}' is not allowed")
        for previous, current in zip(ordered, ordered[1:]):
            if current.start < previous.end:
                raise InvalidSegmentError("incoming segments overlap each other")
        return ordered

    def insert(self, segments: Sequence[VersionedSegment]) -> InsertReport:
        """Insert a batch; raises before mutating anything on conflict"""
        incoming = self._validate(segments)
        report = InsertReport()

        pending = []
        for segment in incoming:
            overlapping = [self._segments[i] for i in self._overlapping(segment.start, segment.end)]
            if any(s == segment for s in overlapping):
                report.skipped += 1
                continue
            for stored in overlapping:
                if stored.version == segment.version:
                    raise VersionConflictError(
                        f"version {segment.version} segment {segment.start.isoformat()}-{segment.end.isoformat()} "
                        f"overlaps stored {stored.start.isoformat()}-{stored.end.isoformat()} of the same version"
                    )
            pending.append(segment)

        for segment in pending:
            self._apply(segment, report)
        return report

    def _apply(self, segment: VersionedSegment, report: InsertReport) -> None:
        indices = self._overlapping(segment.start, segment.end)
        overlapping = [self._segments[i] for i in indices]

        pieces: List[Tuple[datetime, datetime]] = [(segment.start, segment.end)]
        keep: List[VersionedSegment] = []
        for stored in overlapping:
            if stored.version > segment.version:
                pieces = _subtract(pieces, stored.start, stored.end)
                keep.append(stored)
                continue
            report.removed += 1
            if stored.start < segment.start:
                keep.append(stored.model_copy(update={"end": segment.start}))
                report.truncated += 1
            if stored.end > segment.end:
                keep.append(stored.model_copy(update={"start": segment.end}))
                report.truncated += 1

        added = [segment.model_copy(update={"start": a, "end": b}) for a, b in pieces]
        if added:
            report.inserted += 1
        replacement = sorted(keep + added, key=lambda s: s.start)
        self._segments[indices.start:indices.stop] = replacement
        self._starts[indices.start:indices.stop] = [s.start for s in replacement]

    def materialize(
        self,
        span_start: Optional[datetime] = None,
        span_end: Optional[datetime] = None,
        include_gaps: bool = False,
    ) -> List[MaterializedInterval]:
        """Clip to the span and coalesce touching same-label segments (max version)"""
        intervals: List[MaterializedInterval] = []
        for segment in self._segments:
            start = segment.start if span_start is None else max(segment.start, span_start)
            end = segment.end if span_end is None else min(segment.end, span_end)
            if end <= start:
                continue
            last = intervals[-1] if intervals else None
            if last is not None and last.end == start and last.label == segment.label:
                intervals[-1] = last.model_copy(update={"end": end, "version": max(last.version, segment.version)})
            else:
                intervals.append(MaterializedInterval(start=start, end=end, label=segment.label, version=segment.version))

        if not include_gaps:
            return intervals
        return _with_gaps(intervals, span_start, span_end)

    def history(self, start: datetime, end: datetime) -> List[VersionedSegment]:
        """Materialized view of [start, end) as segments, for refinement prompts"""
        return [
            VersionedSegment(start=i.start, end=i.end, label=i.label, version=i.version, home_id=self.home_id)
            for i in self.materialize(start, end)
        ]

    def to_unit_labels(self, span_start: datetime, span_end: datetime, unit: timedelta) -> List[Optional[str]]:
        """Label covering each unit start; None where uncovered"""
        labels: List[Optional[str]] = []
        position = 0
        stamp = span_start
        while stamp < span_end:
            while position < len(self._segments) and self._segments[position].end <= stamp:
                position += 1
            if position < len(self._segments) and self._segments[position].start <= stamp:
                labels.append(self._segments[position].label)
            else:
                labels.append(None)
            stamp += unit
        return labels


def _subtract(pieces: List[Tuple[datetime, datetime]], start: datetime, end: datetime) -> List[Tuple[datetime, datetime]]:
    remaining = []
    for a, b in pieces:
        if end <= a or start >= b:
            remaining.append((a, b))
            continue
        if a < start:
            remaining.append((a, start))
        if end < b:
            remaining.append((end, b))
    return remaining


def _with_gaps(
    intervals: List[MaterializedInterval],
    span_start: Optional[datetime],
    span_end: Optional[datetime],
) -> List[MaterializedInterval]:
    filled: List[MaterializedInterval] = []
    cursor = span_start if span_start is not None else (intervals[0].start if intervals else None)
    for interval in intervals:
        if cursor is not None and interval.start > cursor:
            filled.append(MaterializedInterval(start=cursor, end=interval.start))
        filled.append(interval)
        cursor = interval.end
    if span_end is not None and cursor is not None and cursor < span_end:
        filled.append(MaterializedInterval(start=cursor, end=span_end))
    return filled


# CSV persistence
PathLike = Union[str, Path]


def export_timeline_csv(path: PathLike, intervals: Sequence[MaterializedInterval]) -> None:
    """`start,end,label,version` rows of the labeled materialized timeline"""
    rows = [
        {
            "start": i.start.isoformat(),
            "end": i.end.isoformat(),
            "label": i.label,
            "version": i.version,
        }
        for i in intervals
        if i.label is not None
    ]
    frame = pd.DataFrame(rows, columns=["start", "end", "label", "version"])
    frame.to_csv(path, index=False, lineterminator="\n")


def export_snapshot_csv(path: PathLike, segments: Sequence[VersionedSegment]) -> None:
    rows = [
        {
            "home_id": s.home_id,
            "start": s.start.isoformat(),
            "end": s.end.isoformat(),
            "label": s.label,
            "version": s.version,
        }
        for s in segments
    ]
    pd.DataFrame(rows, columns=["home_id", "start", "end", "label", "version"]).to_csv(path, index=False, lineterminator="\n")


def load_snapshot_csv(path: PathLike, allowed_labels: Optional[Iterable[str]] = None) -> VersionedStore:
    """Rebuild a store from a snapshot or timeline export"""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    home_id = frame["home_id"].iloc[0] if "home_id" in frame.columns and not frame.empty else ""
    store = VersionedStore(home_id=home_id, allowed_labels=allowed_labels)
    segments = [
        VersionedSegment(
            start=TimeUtils.parse_timestamp(row.start),
            end=TimeUtils.parse_timestamp(row.end),
            label=row.label,
            version=int(row.version),
            home_id=home_id,
        )
        for row in frame.itertuples(index=False)
    ]
    store.insert(segments)
    return store
