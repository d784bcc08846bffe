"""
Prompt rendering, response parsing and the retry/fallback policy around a
reasoning backend
"""
import json
import logging
import re
import threading
import time
from datetime import datetime, timedelta
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import json_repair

from .context import NO_CONTEXT, render_prior
from .errors import (
    BackendUnavailableError,
    CountMismatchError,
    CoverageGapError,
    IllegalLabelError,
    OverlapWithinResponseError,
    ParseFailureError,
    PromptRenderError,
    WindowSizeMismatchError,
)
from .schemas import (
    BackendResponse,
    ContextPrior,
    DecodeParams,
    EvidenceBundle,
    MinutePrediction,
    PromptKind,
    PromptRequest,
    RefinementScope,
    SourceToggles,
    VersionedSegment,
)
from .utils import TimeUtils

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "prompt_templates"
PLACEHOLDER_RE = re.compile(r"\{\{([A-Z_]+)\}\}")
_FENCE_RE = re.compile(r"```(?:json|JSON)?")
_STEP_RE = re.compile(r"^### STEP (\d+):", re.MULTILINE)

DEFAULT_SOURCES_DOC = {
    "summary": (
        "Sensor observation summary for the minute: location (rooms where motion was detected, "
        "last occurrence order), interaction (object and appliance interactions) and environment "
        "(min/max/mean of environmental readings)."
    ),
    "env": "env_prediction: activity label from the environmental-sensor recognizer, a coarse hypothesis.",
    "wear": "wear_prediction: label from the wearable recognizer (e.g. sleep, sedentary, walking).",
}


# Templates
@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return (TEMPLATE_DIR / f"{name}.txt").read_text(encoding="utf-8")


def fill_template(template: str, values: Dict[str, str]) -> str:
    """Single-pass {{NAME}} substitution; unknown or leftover placeholders are errors"""
    missing = sorted({name for name in PLACEHOLDER_RE.findall(template) if name not in values})
    if missing:
        raise PromptRenderError(f"no value for placeholder(s): {', '.join(missing)}")
    text = PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template)
    residual = PLACEHOLDER_RE.search(text)
    if residual:
        raise PromptRenderError(f"rendered prompt still contains {residual.group(0)}")
    return text


def split_refine_template(template: str, stage: int) -> str:
    """Refinement template reduced to one STEP section plus the STEP 4 output rules"""
    if stage not in (1, 2, 3):
        raise PromptRenderError(f"split refinement stage must be 1, 2 or 3, got {stage}")
    headers = list(_STEP_RE.finditer(template))
    if len(headers) != 4:
        raise PromptRenderError("refinement template must contain STEP 1 to STEP 4")
    tail = template.index("## CRITICAL REQUIREMENTS")
    bounds = [h.start() for h in headers] + [tail]
    sections = {int(h.group(1)): template[bounds[i]:bounds[i + 1]] for i, h in enumerate(headers)}
    return template[:bounds[0]] + sections[stage] + sections[4] + template[tail:]


def _json_block(value: Any) -> str:
    return json.dumps(value, indent=2, ensure_ascii=False)


def render_sources(sources: SourceToggles, sources_doc: Optional[Dict[str, str]] = None) -> str:
    doc = sources_doc or DEFAULT_SOURCES_DOC
    enabled = [name for name in ("summary", "env", "wear") if getattr(sources, name)]
    if not enabled:
        return "- none"
    return "\n".join(f"- {name}: {doc.get(name, name)}" for name in enabled)


def _masked_bundle(bundle: EvidenceBundle, sources: SourceToggles) -> Dict[str, Any]:
    data = bundle.to_prompt_dict()
    if not sources.summary:
        data["summary"] = None
    if not sources.env:
        data["env_prediction"] = None
    if not sources.wear:
        data["wear_prediction"] = None
    return data


# Rendering
def render_crossref_prompt(
    bundles: Sequence[EvidenceBundle],
    prior: Optional[ContextPrior],
    allowed_labels: Sequence[str],
    window_size: int,
    home_id: str = "",
    sources: Optional[SourceToggles] = None,
    sources_doc: Optional[Dict[str, str]] = None,
    fallback_label: str = "Other",
    decode_params: Optional[DecodeParams] = None,
) -> PromptRequest:
    """Cross-reference prompt over one inference window of evidence bundles"""
    if window_size < 1 or len(bundles) != window_size:
        raise WindowSizeMismatchError(f"expected {window_size} evidence bundles, got {len(bundles)}")
    sources = sources or SourceToggles()

    text = fill_template(load_template("crossref"), {
        "WINDOW_SIZE": str(window_size),
        "HOME_ID": home_id,
        "SOURCES_BLOCK": render_sources(sources, sources_doc),
        "SENSOR_BLOCK": _json_block([_masked_bundle(b, sources) for b in bundles]),
        "CONTEXT_BLOCK": render_prior(prior) if sources.context else NO_CONTEXT,
        "LABELS": json.dumps(list(allowed_labels), ensure_ascii=False),
        "FALLBACK_LABEL": fallback_label,
    })
    return PromptRequest(
        kind=PromptKind.CROSS_REFERENCE,
        text=text,
        trace_id=f"{home_id}:crossref:{bundles[0].timestamp.isoformat()}",
        decode_params=decode_params or DecodeParams(),
    )


def render_refine_prompt(
    minute_predictions: Sequence[MinutePrediction],
    history: Sequence[VersionedSegment],
    prior: Optional[ContextPrior],
    allowed_labels: Sequence[str],
    scope: RefinementScope,
    version: int,
    home_id: str = "",
    stage: Optional[int] = None,
    use_context: bool = True,
    decode_params: Optional[DecodeParams] = None,
) -> PromptRequest:
    """Refinement prompt; `stage` selects a single STEP for split-prompt mode"""
    template = load_template("refine")
    if stage is not None:
        template = split_refine_template(template, stage)

    text = fill_template(template, {
        "HOME_ID": home_id,
        "SCOPE_START": scope.window_start.isoformat(),
        "SCOPE_END": scope.window_end.isoformat(),
        "HORIZON_START": scope.horizon_start.isoformat(),
        "VERSION": str(version),
        "MINUTE_PREDICTION_BLOCK": _json_block([p.to_prompt_dict() for p in minute_predictions]),
        "ACTIVITY_HISTORY_BLOCK": _json_block([s.to_prompt_dict() for s in history]),
        "CONTEXT_BLOCK": render_prior(prior) if use_context else NO_CONTEXT,
        "LABELS": json.dumps(list(allowed_labels), ensure_ascii=False),
    })
    suffix = f":stage{stage}" if stage is not None else ""
    return PromptRequest(
        kind=PromptKind.REFINEMENT,
        text=text,
        trace_id=f"{home_id}:refine:{scope.window_start.isoformat()}{suffix}",
        decode_params=decode_params or DecodeParams(),
        stage=stage,
    )


# Parsing
def sanitize_response(raw_text: str) -> str:
    """Drop code fences and any prose around the outermost JSON object"""
    text = _FENCE_RE.sub("", raw_text or "")
    first, last = text.find("{"), text.rfind("}")
    if first == -1 or last <= first:
        raise ParseFailureError("response contains no JSON object")
    return text[first:last + 1]


def load_payload(raw_text: str) -> Dict[str, Any]:
    text = sanitize_response(raw_text)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError:
        payload = json_repair.loads(text)
    if not isinstance(payload, dict):
        raise ParseFailureError("response is not a JSON object")
    return payload


def canonical_label(label: Any, allowed_labels: Sequence[str]) -> str:
    """Match a returned label to the allowed set, ignoring case and space/underscore"""
    if not isinstance(label, str):
        raise ParseFailureError(f"label {label!r} is not a string")
    if label in allowed_labels:
        return label
    folded = {_fold(name): name for name in allowed_labels}
    match = folded.get(_fold(label))
    if match is None:
        raise IllegalLabelError(f"label '{label}' is not allowed")
    return match


def _fold(label: str) -> str:
    return re.sub(r"[\s_\-]+", "", label).lower()


def _timestamp(value: Any, field: str) -> datetime:
    try:
        return TimeUtils.parse_timestamp(str(value))
    except ValueError:
        raise ParseFailureError(f"{field} {value!r} is not a timestamp")


def parse_crossref_response(
    raw_text: str,
    expected_n: int,
    allowed_labels: Sequence[str],
    timestamps: Optional[Sequence[datetime]] = None,
) -> List[MinutePrediction]:
    """Validate a minute_predictions payload; positions take the expected timestamps when given"""
    payload = load_payload(raw_text)
    items = payload.get("minute_predictions")
    if not isinstance(items, list):
        raise ParseFailureError("'minute_predictions' is missing or not a list")
    if len(items) != expected_n:
        raise CountMismatchError(f"expected {expected_n} minute predictions, got {len(items)}")

    predictions = []
    for position, item in enumerate(items):
        if not isinstance(item, dict):
            raise ParseFailureError(f"minute prediction {position} is not an object")
        labels = item.get("labels")
        if isinstance(labels, str):
            labels = [labels]
        if not isinstance(labels, list) or not labels:
            raise ParseFailureError(f"minute prediction {position} has no labels")
        primary = canonical_label(labels[0], allowed_labels)
        alternative = canonical_label(labels[1], allowed_labels) if len(labels) > 1 else primary
        if timestamps is not None:
            stamp = timestamps[position]
        else:
            stamp = _timestamp(item.get("timestamp"), "timestamp")
        predictions.append(MinutePrediction(
            timestamp=stamp,
            label=primary,
            alternative=alternative,
            reason=str(item.get("reason") or ""),
        ))
    return predictions


def parse_refine_response(
    raw_text: str,
    scope: RefinementScope,
    allowed_labels: Sequence[str],
    version: int,
    home_id: str = "",
) -> List[VersionedSegment]:
    """Validate revised_activities against the scope.

    Segments may reach back before the window (capped at the horizon start)
    and are clipped at the window end; together they must tile the window.
    """
    payload = load_payload(raw_text)
    items = payload.get("revised_activities")
    if not isinstance(items, list) or not items:
        raise ParseFailureError("'revised_activities' is missing or empty")

    raw_segments = []
    for position, item in enumerate(items):
        if not isinstance(item, dict):
            raise ParseFailureError(f"activity {position} is not an object")
        start = _timestamp(item.get("start_timestamp"), "start_timestamp")
        end = _timestamp(item.get("end_timestamp"), "end_timestamp")
        if end <= start:
            raise ParseFailureError(f"activity {position} ends at or before its start")
        # the stored version is always the step number; the echoed one only has to be integral
        raw_version = item.get("version", version)
        try:
            integral = float(raw_version).is_integer()
        except (TypeError, ValueError):
            integral = False
        if not integral:
            raise ParseFailureError(f"activity {position} has a non-integral version {raw_version!r}")
        raw_segments.append((start, end, canonical_label(item.get("label"), allowed_labels)))

    raw_segments.sort(key=lambda s: (s[0], s[1]))
    for previous, current in zip(raw_segments, raw_segments[1:]):
        if current[0] < previous[1]:
            raise OverlapWithinResponseError(
                f"activities {previous[0].isoformat()}-{previous[1].isoformat()} and "
                f"{current[0].isoformat()}-{current[1].isoformat()} overlap"
            )

    cursor = scope.window_start
    for start, end, _ in raw_segments:
        if end <= cursor:
            continue
        if start > cursor and cursor < scope.window_end:
            raise CoverageGapError(f"scope is uncovered from {cursor.isoformat()} to {start.isoformat()}")
        cursor = max(cursor, end)
    if cursor < scope.window_end:
        raise CoverageGapError(f"scope is uncovered from {cursor.isoformat()} to {scope.window_end.isoformat()}")

    segments = []
    for start, end, label in raw_segments:
        start = max(start, scope.horizon_start)
        end = min(end, scope.window_end)
        if end > start:
            segments.append(VersionedSegment(start=start, end=end, label=label, version=version, home_id=home_id))
    return segments


# Fallbacks
def segments_from_labels(
    timestamps: Sequence[datetime],
    labels: Sequence[str],
    unit: timedelta,
    version: int,
    home_id: str = "",
) -> List[VersionedSegment]:
    """Coalesce consecutive equal unit labels into segments"""
    segments: List[VersionedSegment] = []
    run_start, run_label = None, None
    for stamp, label in zip(timestamps, labels):
        if label != run_label:
            if run_label is not None:
                segments.append(VersionedSegment(start=run_start, end=stamp, label=run_label, version=version, home_id=home_id))
            run_start, run_label = stamp, label
    if run_label is not None:
        segments.append(VersionedSegment(start=run_start, end=timestamps[-1] + unit, label=run_label, version=version, home_id=home_id))
    return segments


def crossref_fallback(
    bundles: Sequence[EvidenceBundle],
    allowed_labels: Sequence[str],
    fallback_label: str = "Other",
    sources: Optional[SourceToggles] = None,
) -> List[MinutePrediction]:
    """Environmental prediction passed through, fallback label where absent"""
    use_env = sources is None or sources.env
    predictions = []
    for bundle in bundles:
        env = bundle.env_label if use_env else None
        label = env if env in allowed_labels else fallback_label
        predictions.append(MinutePrediction(
            timestamp=bundle.timestamp,
            label=label,
            alternative=fallback_label,
            reason="fallback: environmental prediction" if label == env else "fallback: no usable evidence",
        ))
    return predictions


def refine_fallback(
    predictions: Sequence[MinutePrediction],
    unit: timedelta,
    version: int,
    home_id: str = "",
) -> List[VersionedSegment]:
    return segments_from_labels([p.timestamp for p in predictions], [p.label for p in predictions], unit, version, home_id)


# Run log
class RunLog:
    """Append-only JSON-lines record of backend calls"""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()

    def record(self, request: PromptRequest, response: BackendResponse) -> None:
        if self.path is None:
            return
        entry = {
            "trace_id": request.trace_id,
            "kind": request.kind.value,
            "prompt_sha256": request.prompt_sha256,
            "response": response.raw_text,
            "attempts": response.attempt_count,
            "latency_ms": round(response.latency_ms, 3),
            "cached": response.cached,
            "degraded": response.degraded,
            "error": response.error,
        }
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry, ensure_ascii=False) + "\n")


# Retry policy
def call_with_retry(
    request: PromptRequest,
    backend,
    parse: Callable[[str], Any],
    fallback: Callable[[], Any],
    max_attempts: int = 3,
    cache=None,
    run_log: Optional[RunLog] = None,
    retry_delay: float = 0.0,
) -> BackendResponse:
    """Call the backend until a response parses.

    Parse failures fall back after `max_attempts` (degraded response);
    transport failures on every attempt raise BackendUnavailableError.
    """
    started = time.perf_counter()
    sha = request.prompt_sha256
    kind = request.kind.value

    if cache is not None:
        cached_text = cache.get(sha, backend.name, backend.model, kind)
        if cached_text is not None:
            try:
                parsed = parse(cached_text)
                response = BackendResponse(
                    raw_text=cached_text,
                    parsed=parsed,
                    cached=True,
                    latency_ms=(time.perf_counter() - started) * 1000,
                )
                if run_log:
                    run_log.record(request, response)
                return response
            except ParseFailureError as e:
                logger.warning(f"{request.trace_id}: cached response no longer parses ({e}), calling backend")

    raw_text = ""
    last_error = None
    transport_failures = 0
    for attempt in range(1, max_attempts + 1):
        try:
            raw_text = backend.complete(request)
        except BackendUnavailableError as e:
            transport_failures += 1
            last_error = str(e)
            logger.warning(f"{request.trace_id}: backend unavailable (attempt {attempt}/{max_attempts}): {e}")
            if attempt < max_attempts and retry_delay:
                time.sleep(retry_delay * attempt)
            continue

        try:
            parsed = parse(raw_text)
        except ParseFailureError as e:
            last_error = f"{type(e).__name__}: {e}"
            logger.warning(f"{request.trace_id}: unusable response (attempt {attempt}/{max_attempts}): {last_error}")
            continue

        if cache is not None:
            cache.put(sha, backend.name, backend.model, kind, raw_text)
        response = BackendResponse(
            raw_text=raw_text,
            parsed=parsed,
            attempt_count=attempt,
            latency_ms=(time.perf_counter() - started) * 1000,
        )
        if run_log:
            run_log.record(request, response)
        return response

    response = BackendResponse(
        raw_text=raw_text,
        error=last_error,
        attempt_count=max_attempts,
        latency_ms=(time.perf_counter() - started) * 1000,
    )
    if transport_failures == max_attempts:
        if run_log:
            run_log.record(request, response)
        raise BackendUnavailableError(f"{request.trace_id}: backend unavailable after {max_attempts} attempts: {last_error}")

    logger.warning(f"{request.trace_id}: falling back after {max_attempts} failed attempts")
    response = response.model_copy(update={"parsed": fallback(), "degraded": True})
    if run_log:
        run_log.record(request, response)
    return response
