from datetime import datetime, timedelta
from enum import Enum
from hashlib import sha256
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


def _iso(ts: datetime) -> str:
    return ts.isoformat()


# Sensor metadata / raw events
class SensorKind(str, Enum):
    MOTION = "motion"
    CONTACT = "contact"
    PLUG = "plug"
    ENVIRONMENTAL = "environmental"


class ValueKind(str, Enum):
    BINARY = "binary"
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class SensorMetadata(BaseModel):
    model_config = ConfigDict(frozen=True)

    sensor_id: str
    kind: SensorKind
    room: str
    object: Optional[str] = None
    is_entrance: bool = False
    # environmental sensors only
    variable: Optional[str] = None
    unit: Optional[str] = None


class SensorValue(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ValueKind
    raw: str
    state: Optional[str] = None
    number: Optional[float] = None
    unit: Optional[str] = None


class Annotation(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    marker: Literal["begin", "end"]


class SensorEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamp: datetime
    sensor_id: str
    value: SensorValue
    annotation: Optional[Annotation] = None


class ParseIssue(BaseModel):
    line_no: int
    code: str
    message: str


class PredictionSource(str, Enum):
    ENV = "env"
    WEAR = "wear"


class PredictionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: PredictionSource
    window_start: datetime
    window_end: datetime
    label: str


class GroundTruthSegment(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: datetime
    end: datetime
    label: str


# Observation summaries
class EnvironmentStat(BaseModel):
    model_config = ConfigDict(frozen=True)

    min: float
    max: float
    mean: float
    unit: Optional[str] = None


class ObservationSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_start: datetime
    window_end: datetime
    locations: List[str] = Field(default_factory=list)
    interactions: List[str] = Field(default_factory=list)
    environment: Dict[str, EnvironmentStat] = Field(default_factory=dict)
    carried_location: bool = False
    out_of_home: bool = False

    def to_prompt_dict(self) -> Dict[str, Any]:
        """Location / interaction / environment blocks as embedded in prompts"""
        return {
            "location": list(self.locations),
            "interaction": list(self.interactions),
            "environment": {
                name: {"min": stat.min, "max": stat.max, "mean": stat.mean, "unit": stat.unit}
                for name, stat in self.environment.items()
            },
        }


# Alignment
class AlignedInterval(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    start: datetime
    end: datetime

    @property
    def unit(self) -> timedelta:
        return self.end - self.start


class EvidenceBundle(BaseModel):
    model_config = ConfigDict(frozen=True)

    interval: AlignedInterval
    summary: Optional[ObservationSummary] = None
    env_label: Optional[str] = None
    wear_label: Optional[str] = None

    @property
    def timestamp(self) -> datetime:
        return self.interval.start

    def to_prompt_dict(self) -> Dict[str, Any]:
        return {
            "timestamp": _iso(self.timestamp),
            "summary": self.summary.to_prompt_dict() if self.summary is not None else None,
            "env_prediction": self.env_label,
            "wear_prediction": self.wear_label,
        }


# Contextual prior
class LayoutDescription(BaseModel):
    house_type: Optional[str] = None
    rooms: Dict[str, List[str]] = Field(default_factory=dict)


class TypicalTime(BaseModel):
    activity: str
    sub_activity: Optional[str] = None
    around: List[str] = Field(default_factory=list)
    start: Optional[str] = None
    end: Optional[str] = None


class TypicalLocation(BaseModel):
    activity: str
    sub_activity: Optional[str] = None
    locations: List[str] = Field(default_factory=list)
    object: Optional[str] = None


class ContextPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    layout: Optional[LayoutDescription] = None
    typical_times: List[TypicalTime] = Field(default_factory=list)
    typical_locations: List[TypicalLocation] = Field(default_factory=list)
    habits: List[str] = Field(default_factory=list)
    allowed_labels: List[str] = Field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        has_layout = self.layout is not None and (self.layout.house_type or self.layout.rooms)
        return not (has_layout or self.typical_times or self.typical_locations or self.habits)


# Reasoning
class PromptKind(str, Enum):
    CROSS_REFERENCE = "cross_reference"
    REFINEMENT = "refinement"


class DecodeParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    # None omits the parameter for models that only accept their default
    temperature: Optional[float] = 0.0
    max_tokens: int = 4096


class PromptRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: PromptKind
    text: str
    trace_id: str
    decode_params: DecodeParams = Field(default_factory=DecodeParams)
    # refinement stage for split-prompt mode (None = unified prompt)
    stage: Optional[int] = None

    @property
    def prompt_sha256(self) -> str:
        return sha256(self.text.encode("utf-8")).hexdigest()


class BackendResponse(BaseModel):
    raw_text: str = ""
    parsed: Optional[Any] = None
    error: Optional[str] = None
    attempt_count: int = 0
    degraded: bool = False
    cached: bool = False
    latency_ms: float = 0.0


class MinutePrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamp: datetime
    label: str
    alternative: str
    reason: str = ""

    def to_prompt_dict(self) -> Dict[str, Any]:
        return {
            "timestamp": _iso(self.timestamp),
            "labels": [self.label, self.alternative],
            "reason": self.reason,
        }


# Versioned timeline
class VersionedSegment(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: datetime
    end: datetime
    label: str
    version: int = Field(ge=0)
    home_id: str = ""

    def to_prompt_dict(self) -> Dict[str, Any]:
        return {
            "home_id": self.home_id,
            "start_timestamp": _iso(self.start),
            "end_timestamp": _iso(self.end),
            "version": self.version,
            "label": self.label,
        }


class MaterializedInterval(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: datetime
    end: datetime
    label: Optional[str] = None
    version: Optional[int] = None


class RefinementScope(BaseModel):
    window_start: datetime
    window_end: datetime
    horizon_start: datetime
    history: List[VersionedSegment] = Field(default_factory=list)

    @model_validator(mode="after")
    def _history_precedes_window(self):
        for segment in self.history:
            if segment.end > self.window_start:
                raise ValueError("history segments must end at or before the window start")
        return self


class InsertReport(BaseModel):
    inserted: int = 0
    skipped: int = 0
    truncated: int = 0
    removed: int = 0


# Evaluation
class LabeledTimeline(BaseModel):
    start: datetime
    end: datetime
    unit_seconds: float
    labels: List[Optional[str]]


class SegmentErrorCounts(BaseModel):
    fr: float = 0.0
    mr: float = 0.0
    of: float = 0.0
    uf: float = 0.0
    fragmented_segments: int = 0
    merging_segments: int = 0
    gt_segments: int = 0
    pred_segments: int = 0
    per_class: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    normalization: str = "Ward-style"


class LabelMap(BaseModel):
    name: str
    mapping: Dict[str, str]


class Fold(BaseModel):
    index: int
    test_start: datetime
    test_end: datetime
    train: List[Tuple[datetime, datetime]] = Field(default_factory=list)


# Pipeline reporting
class DegradedWindow(BaseModel):
    step: int
    stage: str
    reason: str


class RunReport(BaseModel):
    home_id: str
    fold: Optional[int] = None
    span_start: Optional[datetime] = None
    span_end: Optional[datetime] = None
    steps: int = 0
    degraded_windows: List[DegradedWindow] = Field(default_factory=list)
    backend_calls: int = 0
    cache_hits: int = 0
    attempts: int = 0
    unavailable_windows: int = 0
    wall_time_s: float = 0.0
    memory_rss_mb: float = 0.0


class ParseResult(BaseModel):
    events: List[SensorEvent] = Field(default_factory=list)
    issues: List[ParseIssue] = Field(default_factory=list)


class SourceToggles(BaseModel):
    """Evidence sources visible to the reasoning backend"""

    env: bool = True
    wear: bool = True
    summary: bool = True
    context: bool = True
