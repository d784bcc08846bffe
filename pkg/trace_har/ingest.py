"""
Readers for sensor event logs, recognizer prediction files, ground-truth
annotations and sensor metadata
"""
import logging
import re
from collections import defaultdict
from datetime import timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import yaml
from pydantic import ValidationError

from .errors import (
    MalformedEntryError,
    MalformedLineError,
    MalformedRowError,
    UnknownSensorError,
)
from .schemas import (
    Annotation,
    GroundTruthSegment,
    ParseIssue,
    ParseResult,
    PredictionRecord,
    PredictionSource,
    SensorEvent,
    SensorKind,
    SensorMetadata,
    SensorValue,
    ValueKind,
)
from .utils import TimeUtils

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BINARY_STATES = {"ON", "OFF", "OPEN", "CLOSE", "CLOSED", "PRESENT", "ABSENT"}
_NUMERIC_RE = re.compile(r"^(-?\d+(?:\.\d+)?)(°C|C|%RH|%|W|kW|lux)?$")
_ANNOTATION_MARKERS = ("begin", "end")

# (size, step) in events
WINDOW_PRESETS = {
    "casas": (30, 10),
    "deployment": (20, 20),
}

_KIND_TO_VALUE = {
    SensorKind.MOTION: ValueKind.BINARY,
    SensorKind.CONTACT: ValueKind.BINARY,
    SensorKind.PLUG: ValueKind.BINARY,
    SensorKind.ENVIRONMENTAL: ValueKind.NUMERIC,
}


# Sensor metadata
def load_metadata(path: PathLike) -> Dict[str, SensorMetadata]:
    """Load the YAML `sensors:` list into a sensor_id -> metadata mapping"""
    with open(path, encoding="utf-8") as handle:
        document = yaml.safe_load(handle) or {}
    return metadata_from_document(document, source=str(path))


def metadata_from_document(document: dict, source: str = "<memory>") -> Dict[str, SensorMetadata]:
    entries = document.get("sensors") or []
    if not isinstance(entries, list):
        raise MalformedEntryError(f"{source}: 'sensors' must be a list")

    metadata: Dict[str, SensorMetadata] = {}
    for position, entry in enumerate(entries, start=1):
        try:
            sensor = SensorMetadata(**entry)
        except (TypeError, ValidationError) as e:
            raise MalformedEntryError(f"{source}: sensor entry {position} is invalid: {e}")
        if sensor.sensor_id in metadata:
            raise MalformedEntryError(f"{source}: duplicate sensor_id '{sensor.sensor_id}'")
        metadata[sensor.sensor_id] = sensor

    entrances = [s.sensor_id for s in metadata.values() if s.is_entrance]
    if not entrances:
        logger.warning(f"{source}: no entrance sensors declared, out-of-home detection is disabled")
    logger.info(f"Loaded {len(metadata)} sensors from {source}")
    return metadata


# Event log
def parse_value(raw: str, sensor: Optional[SensorMetadata] = None) -> SensorValue:
    token = raw.strip()
    if token.upper() in BINARY_STATES:
        return SensorValue(kind=ValueKind.BINARY, raw=raw, state=token.upper())

    match = _NUMERIC_RE.match(token)
    if match:
        unit = match.group(2) or (sensor.unit if sensor else None)
        return SensorValue(kind=ValueKind.NUMERIC, raw=raw, number=float(match.group(1)), unit=unit)

    return SensorValue(kind=ValueKind.CATEGORICAL, raw=raw)


def parse_event_line(line: str, line_no: int, metadata: Optional[Dict[str, SensorMetadata]] = None) -> Optional[SensorEvent]:
    """Parse one `DATE TIME SENSOR VALUE [ACTIVITY begin|end]` line; None for blank lines"""
    tokens = line.split()
    if not tokens:
        return None
    if len(tokens) < 4:
        raise MalformedLineError(line_no, f"expected at least 4 fields, got {len(tokens)}")

    try:
        timestamp = TimeUtils.parse_date_time(tokens[0], tokens[1])
    except ValueError as e:
        raise MalformedLineError(line_no, str(e))

    annotation = None
    if len(tokens) > 4:
        if tokens[-1] not in _ANNOTATION_MARKERS or len(tokens) < 6:
            raise MalformedLineError(line_no, f"unrecognized trailing fields '{' '.join(tokens[4:])}'")
        annotation = Annotation(label=" ".join(tokens[4:-1]), marker=tokens[-1])

    sensor = metadata.get(tokens[2]) if metadata else None
    return SensorEvent(
        timestamp=timestamp,
        sensor_id=tokens[2],
        value=parse_value(tokens[3], sensor),
        annotation=annotation,
    )


def parse_event_log(
    lines: Iterable[str],
    metadata: Dict[str, SensorMetadata],
    strict: bool = False,
) -> ParseResult:
    """Parse a CASAS-style event log.

    Malformed lines and unknown sensors are collected as issues and skipped;
    with strict=True the first one raises instead. Out-of-order timestamps
    are reported and the events are stably sorted.
    """
    events: List[SensorEvent] = []
    issues: List[ParseIssue] = []
    out_of_order = 0
    last_timestamp = None

    for line_no, line in enumerate(lines, start=1):
        try:
            event = parse_event_line(line, line_no, metadata)
        except MalformedLineError as e:
            if strict:
                raise
            issues.append(ParseIssue(line_no=line_no, code="malformed_line", message=e.message))
            continue
        if event is None:
            continue

        sensor = metadata.get(event.sensor_id)
        if sensor is None:
            if strict:
                raise UnknownSensorError(line_no, event.sensor_id)
            issues.append(ParseIssue(
                line_no=line_no,
                code="unknown_sensor",
                message=f"sensor '{event.sensor_id}' is not in the metadata",
            ))
            continue

        expected = _KIND_TO_VALUE[sensor.kind]
        if event.value.kind != expected:
            message = f"{sensor.kind.value} sensor '{sensor.sensor_id}' reported {event.value.kind.value} value '{event.value.raw}'"
            if strict:
                raise MalformedLineError(line_no, message)
            issues.append(ParseIssue(line_no=line_no, code="value_kind_mismatch", message=message))
            continue

        if last_timestamp is not None and event.timestamp < last_timestamp:
            out_of_order += 1
            issues.append(ParseIssue(
                line_no=line_no,
                code="non_monotonic_timestamp",
                message=f"timestamp {event.timestamp.isoformat()} precedes {last_timestamp.isoformat()}",
            ))
        last_timestamp = event.timestamp if last_timestamp is None else max(last_timestamp, event.timestamp)
        events.append(event)

    if out_of_order:
        logger.warning(f"{out_of_order} events out of timestamp order, sorting")
        events.sort(key=lambda e: e.timestamp)

    skipped = sum(1 for issue in issues if issue.code != "non_monotonic_timestamp")
    if skipped:
        logger.warning(f"Skipped {skipped} event log lines ({_issue_counts(issues)})")
    logger.info(f"Parsed {len(events)} events")
    return ParseResult(events=events, issues=issues)


def read_event_log(path: PathLike, metadata: Dict[str, SensorMetadata], strict: bool = False) -> ParseResult:
    with open(path, encoding="utf-8") as handle:
        return parse_event_log(handle, metadata, strict=strict)


def serialize_event(event: SensorEvent) -> str:
    stamp = event.timestamp.isoformat(sep=" ")
    line = f"{stamp} {event.sensor_id} {event.value.raw}"
    if event.annotation is not None:
        line += f" {event.annotation.label} {event.annotation.marker}"
    return line


def _issue_counts(issues: Sequence[ParseIssue]) -> str:
    counts: Dict[str, int] = defaultdict(int)
    for issue in issues:
        counts[issue.code] += 1
    return ", ".join(f"{code}={n}" for code, n in sorted(counts.items()))


# Event windows
def event_windows(
    events: Sequence[SensorEvent],
    size: int = 30,
    step: int = 10,
    keep_partial: bool = False,
) -> List[Tuple]:
    """Fixed-count event windows as half-open (start, end) instants"""
    if size < 1 or step < 1:
        raise ValueError(f"window size and step must be >= 1, got size={size} step={step}")

    windows = []
    covered = 0
    for i in range(0, len(events), step):
        chunk = events[i:i + size]
        if len(chunk) < size:
            if keep_partial and i + len(chunk) > covered:
                windows.append(_window_bounds(chunk))
            break
        windows.append(_window_bounds(chunk))
        covered = i + size
    return windows


def _window_bounds(chunk: Sequence[SensorEvent]) -> Tuple:
    return chunk[0].timestamp, chunk[-1].timestamp + timedelta(microseconds=1)


# Annotations / ground truth
def pair_annotations(events: Sequence[SensorEvent]) -> Tuple[List[GroundTruthSegment], List[ParseIssue]]:
    """Pair begin/end markers per label, innermost open marker first"""
    open_markers: Dict[str, List] = defaultdict(list)
    segments: List[GroundTruthSegment] = []
    issues: List[ParseIssue] = []

    for position, event in enumerate(events, start=1):
        annotation = event.annotation
        if annotation is None:
            continue
        if annotation.marker == "begin":
            open_markers[annotation.label].append((position, event.timestamp))
            continue

        stack = open_markers[annotation.label]
        if not stack:
            issues.append(ParseIssue(
                line_no=position,
                code="unmatched_end",
                message=f"'{annotation.label} end' without a matching begin",
            ))
            continue
        _, started = stack.pop()
        if event.timestamp > started:
            segments.append(GroundTruthSegment(start=started, end=event.timestamp, label=annotation.label))
        else:
            issues.append(ParseIssue(
                line_no=position,
                code="empty_annotation",
                message=f"'{annotation.label}' ends at its begin instant",
            ))

    for label, stack in open_markers.items():
        for position, _ in stack:
            issues.append(ParseIssue(
                line_no=position,
                code="unmatched_begin",
                message=f"'{label} begin' is never closed",
            ))

    if issues:
        logger.warning(f"Annotation pairing: {_issue_counts(issues)}")
    segments.sort(key=lambda s: s.start)
    return segments, issues


def normalize_ground_truth(segments: Iterable[GroundTruthSegment]) -> List[GroundTruthSegment]:
    """Sort and de-overlap; an earlier segment is truncated at the next one's start"""
    ordered = sorted(segments, key=lambda s: s.start)
    normalized = []
    for i, segment in enumerate(ordered):
        end = segment.end
        if i + 1 < len(ordered):
            end = min(end, ordered[i + 1].start)
        if end > segment.start:
            normalized.append(segment if end == segment.end else segment.model_copy(update={"end": end}))
    return normalized


# CSV files
def _read_csv(path, required: Sequence[str], what: str) -> Optional[pd.DataFrame]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        logger.warning(f"{what} file {path} is empty")
        return None

    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise MalformedRowError(0, f"{what} header is missing column(s) {', '.join(missing)}")
    if frame.empty:
        logger.warning(f"{what} file {path} has no rows")
        return None
    return frame


def parse_predictions(
    path,
    source: Union[PredictionSource, str],
    labels: Optional[Iterable[str]] = None,
) -> List[PredictionRecord]:
    """Read a `window_start,window_end,label` CSV into records sorted by window start"""
    source = PredictionSource(source)
    frame = _read_csv(path, ("window_start", "window_end", "label"), f"{source.value} predictions")
    if frame is None:
        return []

    allowed = set(labels) if labels is not None else None
    records = []
    for row_no, row in enumerate(frame.itertuples(index=False), start=1):
        try:
            start = TimeUtils.parse_timestamp(row.window_start)
            end = TimeUtils.parse_timestamp(row.window_end)
        except ValueError as e:
            raise MalformedRowError(row_no, str(e))
        label = row.label.strip()
        if end <= start:
            raise MalformedRowError(row_no, f"window_end {row.window_end} is not after window_start {row.window_start}")
        if not label:
            raise MalformedRowError(row_no, "empty label")
        if allowed is not None and label not in allowed:
            raise MalformedRowError(row_no, f"label '{label}' is not in the declared label set")
        records.append(PredictionRecord(source=source, window_start=start, window_end=end, label=label))

    records.sort(key=lambda r: r.window_start)
    logger.info(f"Loaded {len(records)} {source.value} prediction windows")
    return records


def parse_ground_truth(path) -> List[GroundTruthSegment]:
    """Read a `start,end,label` CSV and normalize it"""
    frame = _read_csv(path, ("start", "end", "label"), "ground truth")
    if frame is None:
        return []

    segments = []
    for row_no, row in enumerate(frame.itertuples(index=False), start=1):
        try:
            start = TimeUtils.parse_timestamp(row.start)
            end = TimeUtils.parse_timestamp(row.end)
        except ValueError as e:
            raise MalformedRowError(row_no, str(e))
        if end <= start:
            raise MalformedRowError(row_no, f"end {row.end} is not after start {row.start}")
        segments.append(GroundTruthSegment(start=start, end=end, label=row.label.strip()))
    return normalize_ground_truth(segments)


def write_segments_csv(path: PathLike, segments: Iterable[GroundTruthSegment]) -> None:
    rows = [
        {"start": s.start.isoformat(), "end": s.end.isoformat(), "label": s.label}
        for s in segments
    ]
    pd.DataFrame(rows, columns=["start", "end", "label"]).to_csv(path, index=False, lineterminator="\n")
