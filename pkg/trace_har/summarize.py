"""
Per-window sensor observation summaries: locations, interactions and
environmental statistics, with carry-forward and out-of-home detection
"""
import bisect
import logging
from collections import OrderedDict
from datetime import datetime, timedelta
from statistics import fmean
from typing import Dict, List, Optional, Sequence

from .schemas import (
    AlignedInterval,
    EnvironmentStat,
    ObservationSummary,
    SensorEvent,
    SensorKind,
    SensorMetadata,
    ValueKind,
)
from .utils import TimingLogger

logger = logging.getLogger(__name__)

OUT_OF_HOME = "out of home"
DEFAULT_HORIZON = timedelta(minutes=3)

_INTERACTION_VERBS = {
    "OPEN": "open",
    "CLOSE": "close",
    "CLOSED": "close",
    "ON": "turn on",
    "OFF": "turn off",
}

_VARIABLE_BY_UNIT = {
    "°C": "temperature",
    "C": "temperature",
    "%RH": "humidity",
    "%": "humidity",
    "W": "power",
    "kW": "power",
    "lux": "light",
}


def variable_name(sensor: SensorMetadata, unit: Optional[str]) -> str:
    if sensor.variable:
        return sensor.variable
    return _VARIABLE_BY_UNIT.get(unit or sensor.unit or "", sensor.sensor_id)


def map_interactions(events: Sequence[SensorEvent], metadata: Dict[str, SensorMetadata]) -> List[str]:
    """Object interaction phrases in temporal order ("open the cabinet door")"""
    phrases = []
    for event in events:
        sensor = metadata.get(event.sensor_id)
        if sensor is None or sensor.kind not in (SensorKind.CONTACT, SensorKind.PLUG) or not sensor.object:
            continue
        verb = _INTERACTION_VERBS.get(event.value.state or "")
        if verb:
            phrases.append(f"{verb} the {sensor.object}")
    return phrases


def _locations(
    events: Sequence[SensorEvent],
    metadata: Dict[str, SensorMetadata],
    motion_only: bool = True,
) -> List[str]:
    # last occurrence of each room wins its position
    ordered: "OrderedDict[str, None]" = OrderedDict()
    for event in events:
        sensor = metadata.get(event.sensor_id)
        if sensor is None:
            continue
        if motion_only and (sensor.kind != SensorKind.MOTION or event.value.state != "ON"):
            continue
        ordered.pop(sensor.room, None)
        ordered[sensor.room] = None
    return list(ordered)


def _environment(events: Sequence[SensorEvent], metadata: Dict[str, SensorMetadata]) -> Dict[str, EnvironmentStat]:
    readings: Dict[str, List[float]] = {}
    units: Dict[str, Optional[str]] = {}
    for event in events:
        sensor = metadata.get(event.sensor_id)
        if sensor is None or sensor.kind != SensorKind.ENVIRONMENTAL or event.value.kind != ValueKind.NUMERIC:
            continue
        unit = sensor.unit or event.value.unit
        name = variable_name(sensor, unit)
        readings.setdefault(name, []).append(event.value.number)
        units.setdefault(name, unit)

    stats = {}
    for name, values in readings.items():
        lo, hi = min(values), max(values)
        mean = min(max(fmean(values), lo), hi)
        stats[name] = EnvironmentStat(min=lo, max=hi, mean=mean, unit=units[name])
    return stats


def summarize_window(
    events: Sequence[SensorEvent],
    previous: Optional[ObservationSummary],
    metadata: Dict[str, SensorMetadata],
    window_start: datetime,
    window_end: datetime,
    out_of_home: bool = False,
) -> ObservationSummary:
    """Summarize the events of one window, carrying location and environment forward"""
    locations = _locations(events, metadata)
    carried = False
    if not locations and previous is not None:
        if previous.out_of_home:
            # back home: rooms of whatever fired, never the sentinel
            locations = _locations(events, metadata, motion_only=False)
        else:
            locations = list(previous.locations)
            carried = True

    environment = dict(previous.environment) if previous is not None else {}
    environment.update(_environment(events, metadata))

    if out_of_home:
        locations = [OUT_OF_HOME]
        carried = False

    return ObservationSummary(
        window_start=window_start,
        window_end=window_end,
        locations=locations,
        interactions=map_interactions(events, metadata),
        environment=environment,
        carried_location=carried,
        out_of_home=out_of_home,
    )


def detect_out_of_home(
    events: Sequence[SensorEvent],
    metadata: Dict[str, SensorMetadata],
    window_ends: Sequence[datetime],
    horizon: timedelta = DEFAULT_HORIZON,
) -> List[bool]:
    """Per window: the last event before the window end came from an entrance
    sensor and nothing fired within `horizon` after it (end of log counts as quiet)"""
    if not any(sensor.is_entrance for sensor in metadata.values()):
        return [False] * len(window_ends)

    stamps = [event.timestamp for event in events]
    flags = []
    for window_end in window_ends:
        last = bisect.bisect_left(stamps, window_end) - 1
        if last < 0:
            flags.append(False)
            continue
        sensor = metadata.get(events[last].sensor_id)
        if sensor is None or not sensor.is_entrance:
            flags.append(False)
            continue
        following = last + 1
        quiet = following >= len(events) or stamps[following] - stamps[last] >= horizon
        flags.append(quiet)
    return flags


@TimingLogger.log_execution_time
def summarize_timeline(
    events: Sequence[SensorEvent],
    metadata: Dict[str, SensorMetadata],
    timeline: Sequence[AlignedInterval],
    horizon: timedelta = DEFAULT_HORIZON,
) -> List[ObservationSummary]:
    """One summary per aligned interval, folded left to right"""
    if not timeline:
        return []

    away = detect_out_of_home(events, metadata, [interval.end for interval in timeline], horizon)
    stamps = [event.timestamp for event in events]
    summaries: List[ObservationSummary] = []
    previous = None
    for interval, out_of_home in zip(timeline, away):
        lo = bisect.bisect_left(stamps, interval.start)
        hi = bisect.bisect_left(stamps, interval.end)
        previous = summarize_window(
            events[lo:hi], previous, metadata, interval.start, interval.end, out_of_home=out_of_home
        )
        summaries.append(previous)

    away_count = sum(away)
    if away_count:
        logger.info(f"{away_count} of {len(timeline)} intervals flagged out of home")
    return summaries
