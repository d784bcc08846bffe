"""
User contextual prior: loading, derivation from labeled history, rendering
"""
import bisect
import logging
import re
from collections import Counter, defaultdict
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import yaml
from pydantic import ValidationError

from .errors import MalformedEntryError
from .schemas import (
    ContextPrior,
    GroundTruthSegment,
    SensorEvent,
    SensorKind,
    SensorMetadata,
    TypicalLocation,
    TypicalTime,
)

logger = logging.getLogger(__name__)

NO_CONTEXT = "No user context available."

_CLOCK_RE = re.compile(r"^([01]\d|2[0-3]):[0-5]\d$")


def _check_clock(value: str, where: str) -> None:
    if not _CLOCK_RE.match(value):
        raise MalformedEntryError(f"{where}: '{value}' is not an HH:MM time")


def prior_from_document(document: dict, source: str = "<memory>") -> ContextPrior:
    try:
        prior = ContextPrior(**document)
    except (TypeError, ValidationError) as e:
        raise MalformedEntryError(f"{source}: invalid contextual prior: {e}")

    for position, entry in enumerate(prior.typical_times, start=1):
        where = f"{source}: typical_times[{position}] ({entry.activity})"
        if not entry.around and not (entry.start and entry.end):
            raise MalformedEntryError(f"{where}: needs 'around' or both 'start' and 'end'")
        for value in [*entry.around, *(t for t in (entry.start, entry.end) if t)]:
            _check_clock(value, where)
    for position, entry in enumerate(prior.typical_locations, start=1):
        if not entry.locations:
            raise MalformedEntryError(f"{source}: typical_locations[{position}] ({entry.activity}) has no locations")
    return prior


def load_prior(path: Union[str, Path, None], allowed_labels: Optional[Sequence[str]] = None) -> ContextPrior:
    """Load a YAML prior; missing sections stay empty, a missing path gives an empty prior"""
    if path is None:
        return ContextPrior(allowed_labels=list(allowed_labels or []))

    with open(path, encoding="utf-8") as handle:
        document = yaml.safe_load(handle) or {}
    if not isinstance(document, dict):
        raise MalformedEntryError(f"{path}: top level must be a mapping")

    prior = prior_from_document(document, source=str(path))
    if allowed_labels is not None:
        prior = prior.model_copy(update={"allowed_labels": list(allowed_labels)})

    unknown = unknown_activities(prior)
    if unknown:
        logger.warning(f"{path}: activities not in the label set: {', '.join(unknown)}")
    logger.info(f"Loaded contextual prior from {path}")
    return prior


def unknown_activities(prior: ContextPrior) -> List[str]:
    if not prior.allowed_labels:
        return []
    allowed = set(prior.allowed_labels)
    named = [entry.activity for entry in [*prior.typical_times, *prior.typical_locations]]
    return sorted({name for name in named if name not in allowed})


# Rendering
def _name(activity: str, sub_activity: Optional[str]) -> str:
    return f"{activity} / {sub_activity}" if sub_activity else activity


def _render_time(entry: TypicalTime) -> str:
    name = _name(entry.activity, entry.sub_activity)
    if entry.start and entry.end and not entry.around:
        return f"{name}: usually starts around {entry.start} and ends around {entry.end}."
    line = f"{name}: usually occurs around {entry.around[0]}."
    if len(entry.around) > 1:
        line += f" (may also occur around {' or '.join(entry.around[1:])})"
    return line


def _render_location(entry: TypicalLocation) -> str:
    name = _name(entry.activity, entry.sub_activity)
    if entry.object:
        return f"{name}: usually occurs around {entry.object} in {entry.locations[0]}."
    line = f"{name}: usually occurs in {entry.locations[0]}."
    if len(entry.locations) > 1:
        line += f" (may also occur in {' or '.join(entry.locations[1:])})"
    return line


def render_prior(prior: Optional[ContextPrior]) -> str:
    """Deterministic text form embedded as the prompt context block"""
    if prior is None or prior.is_empty:
        return NO_CONTEXT

    lines: List[str] = []
    if prior.layout is not None:
        if prior.layout.house_type:
            lines.append(f"User is living in a {prior.layout.house_type}.")
        for room, objects in prior.layout.rooms.items():
            lines.append(f"There is a {room} with {', '.join(objects)}." if objects else f"There is a {room}.")
    if prior.typical_times:
        lines.append("Typical times:")
        lines.extend(_render_time(entry) for entry in prior.typical_times)
    if prior.typical_locations:
        lines.append("Typical locations:")
        lines.extend(_render_location(entry) for entry in prior.typical_locations)
    if prior.habits:
        lines.append("Habits:")
        lines.extend(prior.habits)
    return "\n".join(lines)


# Derivation from labeled history
def _start_hour(ts: datetime) -> int:
    hours = ts.hour + ts.minute / 60 + ts.second / 3600
    return int(hours + 0.5) % 24


def _ranked_buckets(values: Iterable) -> List[Tuple]:
    """(value, count) by count desc, ties to the smaller value"""
    counts = Counter(values)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))


def _within(segment: GroundTruthSegment, spans: Sequence[Tuple[datetime, datetime]]) -> bool:
    return any(start <= segment.start and segment.end <= end for start, end in spans)


def derive_prior_from_history(
    segments: Sequence[GroundTruthSegment],
    train_spans: Optional[Sequence[Tuple[datetime, datetime]]] = None,
    events: Optional[Sequence[SensorEvent]] = None,
    metadata: Optional[Dict[str, SensorMetadata]] = None,
    allowed_labels: Optional[Sequence[str]] = None,
    min_instances: int = 3,
    secondary_share: float = 0.25,
    max_habits: int = 5,
    min_bigram_count: int = 3,
) -> ContextPrior:
    """Statistical prior from training annotations.

    Only segments lying entirely inside `train_spans` are used when spans
    are given.
    """
    if train_spans is not None:
        used = [s for s in segments if _within(s, train_spans)]
        if len(used) < len(segments):
            logger.info(f"Prior derivation ignores {len(segments) - len(used)} segments outside the training spans")
    else:
        used = list(segments)
    used.sort(key=lambda s: s.start)

    by_label: Dict[str, List[GroundTruthSegment]] = defaultdict(list)
    for segment in used:
        by_label[segment.label].append(segment)

    kept = sorted(label for label, group in by_label.items() if len(group) >= min_instances)
    omitted = sorted(set(by_label) - set(kept))
    if omitted:
        logger.warning(f"Too few instances (< {min_instances}) to derive a routine for: {', '.join(omitted)}")

    typical_times = []
    for label in kept:
        group = by_label[label]
        ranked = _ranked_buckets(_start_hour(s.start) for s in group)
        around = [f"{ranked[0][0]:02d}:00"]
        if len(ranked) > 1 and ranked[1][1] >= secondary_share * len(group):
            around.append(f"{ranked[1][0]:02d}:00")
        typical_times.append(TypicalTime(activity=label, around=around))

    typical_locations = []
    if events is not None and metadata:
        typical_locations = _derive_locations(kept, by_label, events, metadata, secondary_share)

    bigrams = Counter(
        (a.label, b.label) for a, b in zip(used, used[1:]) if a.label != b.label
    )
    frequent = sorted(
        ((pair, n) for pair, n in bigrams.items() if n >= min_bigram_count),
        key=lambda item: (-item[1], item[0]),
    )[:max_habits]
    habits = [f"{after}: usually occurs after {before}." for (before, after), _ in frequent]

    labels = list(allowed_labels) if allowed_labels is not None else sorted(by_label)
    return ContextPrior(
        typical_times=typical_times,
        typical_locations=typical_locations,
        habits=habits,
        allowed_labels=labels,
    )


def _derive_locations(
    labels: Sequence[str],
    by_label: Dict[str, List[GroundTruthSegment]],
    events: Sequence[SensorEvent],
    metadata: Dict[str, SensorMetadata],
    secondary_share: float,
) -> List[TypicalLocation]:
    motion = [
        (e.timestamp, metadata[e.sensor_id].room)
        for e in events
        if e.sensor_id in metadata
        and metadata[e.sensor_id].kind == SensorKind.MOTION
        and e.value.state == "ON"
    ]
    stamps = [ts for ts, _ in motion]

    entries = []
    for label in labels:
        rooms = []
        for segment in by_label[label]:
            lo = bisect.bisect_left(stamps, segment.start)
            hi = bisect.bisect_left(stamps, segment.end)
            rooms.extend(room for _, room in motion[lo:hi])
        if not rooms:
            continue
        ranked = _ranked_buckets(rooms)
        locations = [ranked[0][0]]
        if len(ranked) > 1 and ranked[1][1] >= secondary_share * len(rooms):
            locations.append(ranked[1][0])
        entries.append(TypicalLocation(activity=label, locations=locations))
    return entries
