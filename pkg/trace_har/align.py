"""
Shared aligned timeline and projection of prediction streams onto it
"""
import logging
from collections import defaultdict
from datetime import datetime, timedelta
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import EmptyTimelineError
from .schemas import (
    AlignedInterval,
    EvidenceBundle,
    ObservationSummary,
    PredictionRecord,
    SensorEvent,
)
from .utils import TimeUtils, TimingLogger

logger = logging.getLogger(__name__)


def build_timeline(start: datetime, end: datetime, unit: timedelta) -> List[AlignedInterval]:
    """Tile [floor(start), ceil(end)) with unit-length intervals"""
    origin = TimeUtils.floor_to_unit(start, unit)
    stop = TimeUtils.ceil_to_unit(end, unit)
    count = (stop - origin) // unit
    return [
        AlignedInterval(index=i, start=origin + i * unit, end=origin + (i + 1) * unit)
        for i in range(count)
    ]


def infer_span(
    events: Sequence[SensorEvent],
    record_streams: Iterable[Sequence[PredictionRecord]],
    unit: timedelta,
) -> Tuple[datetime, datetime]:
    """Span covering every event and prediction window, snapped to the unit grid"""
    starts, ends = [], []
    if events:
        starts.append(events[0].timestamp)
        ends.append(TimeUtils.floor_to_unit(events[-1].timestamp, unit) + unit)
    for records in record_streams:
        if records:
            starts.append(min(r.window_start for r in records))
            ends.append(TimeUtils.ceil_to_unit(max(r.window_end for r in records), unit))
    if not starts:
        raise EmptyTimelineError("no events or predictions to build a timeline from")
    return TimeUtils.floor_to_unit(min(starts), unit), max(ends)


def _grid(timeline: Sequence[AlignedInterval]) -> Tuple[datetime, timedelta]:
    return timeline[0].start, timeline[0].unit


def _index_range(start: datetime, end: datetime, origin: datetime, unit: timedelta, count: int) -> range:
    first = max(0, (start - origin) // unit)
    last = min(count, -((origin - end) // unit))  # ceil division
    return range(first, last)


def merge_runs(records: Sequence[PredictionRecord]) -> List[PredictionRecord]:
    """Same-label windows that overlap or touch, merged into single runs"""
    by_label: Dict[str, List[PredictionRecord]] = defaultdict(list)
    for record in records:
        by_label[record.label].append(record)
    merged = []
    for group in by_label.values():
        group.sort(key=lambda r: (r.window_start, r.window_end))
        current = group[0]
        for record in group[1:]:
            if record.window_start > current.window_end:
                merged.append(current)
                current = record
            elif record.window_end > current.window_end:
                current = current.model_copy(update={"window_end": record.window_end})
        merged.append(current)
    merged.sort(key=lambda r: (r.window_start, r.window_end, r.label))
    return merged


def _candidates(records: Sequence[PredictionRecord], timeline: Sequence[AlignedInterval]) -> Dict[int, List[PredictionRecord]]:
    origin, unit = _grid(timeline)
    by_interval: Dict[int, List[PredictionRecord]] = defaultdict(list)
    for record in merge_runs(records):
        for index in _index_range(record.window_start, record.window_end, origin, unit, len(timeline)):
            by_interval[index].append(record)
    return by_interval


def _label_coverage(interval: AlignedInterval, records: Sequence[PredictionRecord]) -> Dict[str, Tuple[timedelta, datetime, datetime]]:
    """label -> (covered length, earliest covered instant, earliest run start)"""
    pieces: Dict[str, List[Tuple[datetime, datetime]]] = defaultdict(list)
    raw_starts: Dict[str, datetime] = {}
    for record in merge_runs(records):
        clipped = TimeUtils.clip([(record.window_start, record.window_end)], interval.start, interval.end)
        if not clipped:
            continue
        pieces[record.label].extend(clipped)
        raw_starts[record.label] = min(raw_starts.get(record.label, record.window_start), record.window_start)
    return {
        label: (TimeUtils.union_length(spans), min(s for s, _ in spans), raw_starts[label])
        for label, spans in pieces.items()
    }


def majority_label(interval: AlignedInterval, records: Sequence[PredictionRecord]) -> Optional[str]:
    """Label with the largest covered time inside the interval.

    Ties: earliest covered instant, then the earliest start of a run of
    touching same-label windows, then the lexicographically smaller label.
    """
    coverage = _label_coverage(interval, records)
    if not coverage:
        return None
    ranked = sorted(coverage.items(), key=lambda item: (-item[1][0], item[1][1], item[1][2], item[0]))
    return ranked[0][0]


def project_event_predictions(
    records: Sequence[PredictionRecord],
    timeline: Sequence[AlignedInterval],
) -> List[Optional[str]]:
    """Majority-overlap label per interval; None where no window overlaps"""
    if not timeline:
        return []
    candidates = _candidates(records, timeline)
    return [majority_label(interval, candidates.get(interval.index, [])) for interval in timeline]


def project_fixed_windows(
    records: Sequence[PredictionRecord],
    timeline: Sequence[AlignedInterval],
) -> List[Optional[str]]:
    """Direct association for grid-aligned windows, majority overlap for the rest"""
    if not timeline:
        return []
    origin, unit = _grid(timeline)
    labels: List[Optional[str]] = [None] * len(timeline)
    misaligned = []
    for record in records:
        length = record.window_end - record.window_start
        if (record.window_start - origin) % unit or length % unit:
            misaligned.append(record)
            continue
        for index in _index_range(record.window_start, record.window_end, origin, unit, len(timeline)):
            labels[index] = record.label

    if misaligned:
        logger.warning(f"{len(misaligned)} of {len(records)} windows are off the {unit} grid, using majority overlap for them")
        candidates = _candidates(misaligned, timeline)
        for index, group in candidates.items():
            if labels[index] is None:
                labels[index] = majority_label(timeline[index], group)
    return labels


def overlap_table(
    records: Sequence[PredictionRecord],
    timeline: Sequence[AlignedInterval],
) -> List[Dict[str, float]]:
    """Per interval, seconds covered by each label"""
    if not timeline:
        return []
    candidates = _candidates(records, timeline)
    table = []
    for interval in timeline:
        coverage = _label_coverage(interval, candidates.get(interval.index, []))
        table.append({label: value[0].total_seconds() for label, value in sorted(coverage.items())})
    return table


@TimingLogger.log_execution_time
def build_bundles(
    summaries: Optional[Sequence[ObservationSummary]],
    env_labels: Optional[Sequence[Optional[str]]],
    wear_labels: Optional[Sequence[Optional[str]]],
    timeline: Sequence[AlignedInterval],
) -> List[EvidenceBundle]:
    """One evidence bundle per interval; absent sources leave fields empty"""
    if not timeline:
        raise EmptyTimelineError("cannot build evidence bundles over an empty timeline")

    for name, stream in (("summaries", summaries), ("env_labels", env_labels), ("wear_labels", wear_labels)):
        if stream is not None and len(stream) != len(timeline):
            raise ValueError(f"{name} has {len(stream)} entries for {len(timeline)} intervals")

    bundles = []
    for i, interval in enumerate(timeline):
        bundles.append(EvidenceBundle(
            interval=interval,
            summary=summaries[i] if summaries is not None else None,
            env_label=env_labels[i] if env_labels is not None else None,
            wear_label=wear_labels[i] if wear_labels is not None else None,
        ))
    return bundles
