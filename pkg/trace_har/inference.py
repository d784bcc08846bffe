"""
Per-home pipeline: summarize, align, cross-reference, refine, and fold the
refined segments into a versioned timeline
"""
import json
import logging
import threading
import time
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import psutil
from pydantic import BaseModel, ConfigDict, Field

from .align import build_bundles, build_timeline, infer_span, project_event_predictions, project_fixed_windows
from .config import HomeConfig, RunConfig
from .context import derive_prior_from_history, load_prior
from .errors import BackendUnavailableError, EmptyTimelineError, InsufficientDataError
from .evaluation import apply_label_map, blocked_splits, evaluate_timelines
from .ingest import load_metadata, parse_ground_truth, parse_predictions, read_event_log
from .label_maps import load_label_map
from .reasoner import (
    RunLog,
    call_with_retry,
    crossref_fallback,
    parse_crossref_response,
    parse_refine_response,
    refine_fallback,
    render_crossref_prompt,
    render_refine_prompt,
)
from .schemas import (
    AlignedInterval,
    BackendResponse,
    ContextPrior,
    DecodeParams,
    DegradedWindow,
    EvidenceBundle,
    Fold,
    GroundTruthSegment,
    MaterializedInterval,
    MinutePrediction,
    ObservationSummary,
    PredictionRecord,
    PromptRequest,
    RefinementScope,
    RunReport,
    SensorEvent,
    SensorMetadata,
    SourceToggles,
    VersionedSegment,
)
from .summarize import summarize_timeline
from .timeline import VersionedStore, export_snapshot_csv, export_timeline_csv
from .utils import TimeUtils, TimingLogger

logger = logging.getLogger(__name__)


class HomeInputs(BaseModel):
    """Everything ingested for one home"""

    home_id: str
    events: List[SensorEvent] = Field(default_factory=list)
    metadata: Dict[str, SensorMetadata] = Field(default_factory=dict)
    env_records: List[PredictionRecord] = Field(default_factory=list)
    wear_records: List[PredictionRecord] = Field(default_factory=list)
    prior: Optional[ContextPrior] = None
    ground_truth: List[GroundTruthSegment] = Field(default_factory=list)


class PipelineResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    store: VersionedStore
    timeline: List[MaterializedInterval]
    minute_predictions: List[MinutePrediction]
    baseline: List[GroundTruthSegment]
    report: RunReport


class ReasoningClient:
    """Backend plus its retry policy, cache and call accounting for one run"""

    def __init__(
        self,
        backend,
        max_attempts: int = 3,
        retry_delay: float = 0.0,
        cache=None,
        run_log: Optional[RunLog] = None,
        decode_params: Optional[DecodeParams] = None,
    ):
        self.backend = backend
        self.max_attempts = max_attempts
        self.retry_delay = retry_delay
        self.cache = cache
        self.run_log = run_log
        self.decode_params = decode_params or DecodeParams()
        self.backend_calls = 0
        self.cache_hits = 0
        self.attempts = 0
        self.degraded: List[Tuple[str, str]] = []
        self._lock = threading.Lock()

    def call(self, request: PromptRequest, parse, fallback) -> BackendResponse:
        try:
            response = call_with_retry(
                request, self.backend, parse, fallback,
                max_attempts=self.max_attempts,
                cache=self.cache,
                run_log=self.run_log,
                retry_delay=self.retry_delay,
            )
        except BackendUnavailableError:
            with self._lock:
                self.backend_calls += 1
                self.attempts += self.max_attempts
            raise

        with self._lock:
            if response.cached:
                self.cache_hits += 1
            else:
                self.backend_calls += 1
                self.attempts += response.attempt_count
            if response.degraded:
                self.degraded.append((request.trace_id, response.error or "unparseable response"))
        return response


# Stages
def cross_reference(
    bundles: Sequence[EvidenceBundle],
    prior: Optional[ContextPrior],
    client: ReasoningClient,
    allowed_labels: Sequence[str],
    home_id: str = "",
    sources: Optional[SourceToggles] = None,
    fallback_label: str = "Other",
) -> List[MinutePrediction]:
    """One minute prediction per bundle for the current inference window"""
    request = render_crossref_prompt(
        bundles, prior, allowed_labels, len(bundles),
        home_id=home_id,
        sources=sources,
        fallback_label=fallback_label,
        decode_params=client.decode_params,
    )
    timestamps = [bundle.timestamp for bundle in bundles]
    response = client.call(
        request,
        parse=lambda raw: parse_crossref_response(raw, len(bundles), allowed_labels, timestamps),
        fallback=lambda: crossref_fallback(bundles, allowed_labels, fallback_label, sources),
    )
    return response.parsed


def refine(
    predictions: Sequence[MinutePrediction],
    history: Sequence[VersionedSegment],
    prior: Optional[ContextPrior],
    client: ReasoningClient,
    allowed_labels: Sequence[str],
    scope: RefinementScope,
    version: int,
    unit: timedelta,
    home_id: str = "",
    mode: str = "unified",
    use_context: bool = True,
) -> List[VersionedSegment]:
    """Revised segments covering the scope window, stamped with `version`.

    Split mode runs the smoothing, continuity and context stages as three
    prompts; each stage's segments become the next stage's minute labels.
    """
    stages: List[Optional[int]] = [None] if mode == "unified" else [1, 2, 3]
    current = list(predictions)
    segments: List[VersionedSegment] = []
    # (label, start) of a segment some stage extended back before the window
    reach: Optional[Tuple[str, datetime]] = None
    for stage in stages:
        request = render_refine_prompt(
            current, history, prior, allowed_labels, scope, version,
            home_id=home_id,
            stage=stage,
            use_context=use_context,
            decode_params=client.decode_params,
        )
        stage_input = list(current)
        response = client.call(
            request,
            parse=lambda raw: parse_refine_response(raw, scope, allowed_labels, version, home_id),
            fallback=lambda: refine_fallback(stage_input, unit, version, home_id),
        )
        segments = response.parsed
        if segments and segments[0].start < scope.window_start:
            reach = (segments[0].label, segments[0].start)
        if stage is not None and stage < 3:
            current = relabel_predictions(current, segments)

    if reach is not None and segments and segments[0].start == scope.window_start and segments[0].label == reach[0]:
        segments[0] = segments[0].model_copy(update={"start": reach[1]})
    return segments


def relabel_predictions(predictions: Sequence[MinutePrediction], segments: Sequence[VersionedSegment]) -> List[MinutePrediction]:
    """Minute predictions relabeled by the segment covering each timestamp"""
    relabeled = []
    for prediction in predictions:
        covering = next((s for s in segments if s.start <= prediction.timestamp < s.end), None)
        if covering is None or covering.label == prediction.label:
            relabeled.append(prediction)
        else:
            relabeled.append(prediction.model_copy(update={"label": covering.label}))
    return relabeled


# Pipeline
def _step_offsets(count: int, window: int, stride: int) -> List[int]:
    offsets = []
    offset = 0
    while offset < count:
        offsets.append(offset)
        if offset + window >= count:
            break
        offset += stride
    return offsets


def _baseline_segments(labels: Sequence[Optional[str]], starts: Sequence[datetime], unit: timedelta) -> List[GroundTruthSegment]:
    segments: List[GroundTruthSegment] = []
    for label, start in zip(labels, starts):
        if label is None:
            continue
        if segments and segments[-1].label == label and segments[-1].end == start:
            segments[-1] = segments[-1].model_copy(update={"end": start + unit})
        else:
            segments.append(GroundTruthSegment(start=start, end=start + unit, label=label))
    return segments


class Evidence(BaseModel):
    timeline: List[AlignedInterval]
    summaries: List[ObservationSummary]
    env_labels: Optional[List[Optional[str]]] = None
    wear_labels: Optional[List[Optional[str]]] = None
    bundles: List[EvidenceBundle]


def prepare_evidence(
    inputs: HomeInputs,
    config: RunConfig,
    span: Optional[Tuple[datetime, datetime]] = None,
) -> Evidence:
    """Aligned timeline with summaries, projected labels and evidence bundles"""
    unit = TimeUtils.unit_delta(config.window.unit_seconds)
    if span is None:
        span = infer_span(inputs.events, [inputs.env_records, inputs.wear_records], unit)
    timeline = build_timeline(span[0], span[1], unit)
    if not timeline:
        raise EmptyTimelineError(f"home '{inputs.home_id}': span {span[0].isoformat()} to {span[1].isoformat()} is empty")
    logger.info(
        f"Home {inputs.home_id}: {len(timeline)} intervals from "
        f"{timeline[0].start.isoformat()} to {timeline[-1].end.isoformat()}"
    )

    summaries = summarize_timeline(
        inputs.events, inputs.metadata, timeline,
        horizon=timedelta(seconds=config.window.out_of_home_horizon_s),
    )
    env_labels = project_event_predictions(inputs.env_records, timeline) if inputs.env_records else None
    wear_labels = project_fixed_windows(inputs.wear_records, timeline) if inputs.wear_records else None
    return Evidence(
        timeline=timeline,
        summaries=summaries,
        env_labels=env_labels,
        wear_labels=wear_labels,
        bundles=build_bundles(summaries, env_labels, wear_labels, timeline),
    )


@TimingLogger.log_execution_time
def run_pipeline(
    inputs: HomeInputs,
    config: RunConfig,
    client: ReasoningClient,
    span: Optional[Tuple[datetime, datetime]] = None,
    prior: Optional[ContextPrior] = None,
    fold: Optional[int] = None,
) -> PipelineResult:
    """Slide the inference window across the span and build the versioned timeline"""
    started = time.perf_counter()
    unit = TimeUtils.unit_delta(config.window.unit_seconds)
    window = config.window.window_units
    stride = config.window.stride
    prior = prior if prior is not None else inputs.prior
    home_id = inputs.home_id

    evidence = prepare_evidence(inputs, config, span)
    timeline, bundles, env_labels = evidence.timeline, evidence.bundles, evidence.env_labels
    span_start, span_end = timeline[0].start, timeline[-1].end

    store = VersionedStore(home_id=home_id, allowed_labels=config.labels)
    report = RunReport(home_id=home_id, fold=fold, span_start=span_start, span_end=span_end)
    minute_predictions: Dict[datetime, MinutePrediction] = {}
    history_span = config.window.history_windows * window * unit

    for step, offset in enumerate(_step_offsets(len(bundles), window, stride), start=1):
        chunk = bundles[offset:offset + window]
        scope_start, scope_end = chunk[0].interval.start, chunk[-1].interval.end
        horizon_start = max(span_start, scope_start - history_span)
        history = store.history(horizon_start, scope_start)
        scope = RefinementScope(
            window_start=scope_start,
            window_end=scope_end,
            horizon_start=horizon_start,
            history=history,
        )
        degraded_before = len(client.degraded)

        try:
            predictions = cross_reference(
                chunk, prior, client, config.labels,
                home_id=home_id,
                sources=config.sources,
                fallback_label=config.fallback_label,
            )
        except BackendUnavailableError as e:
            report.unavailable_windows += 1
            report.degraded_windows.append(DegradedWindow(step=step, stage="cross_reference", reason=str(e)))
            predictions = crossref_fallback(chunk, config.labels, config.fallback_label, config.sources)

        try:
            segments = refine(
                predictions, history, prior, client, config.labels, scope, step, unit,
                home_id=home_id,
                mode=config.refine_mode,
                use_context=config.sources.context,
            )
        except BackendUnavailableError as e:
            report.degraded_windows.append(DegradedWindow(step=step, stage="refinement", reason=str(e)))
            segments = refine_fallback(predictions, unit, step, home_id)

        for trace_id, reason in client.degraded[degraded_before:]:
            stage = "cross_reference" if ":crossref:" in trace_id else "refinement"
            report.degraded_windows.append(DegradedWindow(step=step, stage=stage, reason=reason))

        for prediction in predictions:
            minute_predictions[prediction.timestamp] = prediction
        store.insert(segments)
        report.steps = step

    report.backend_calls = client.backend_calls
    report.cache_hits = client.cache_hits
    report.attempts = client.attempts
    report.wall_time_s = round(time.perf_counter() - started, 3)
    report.memory_rss_mb = round(psutil.Process().memory_info().rss / (1024 * 1024), 1)
    if report.degraded_windows:
        logger.warning(f"Home {home_id}: {len(report.degraded_windows)} degraded window stage(s) in {report.steps} steps")
    logger.info(f"Home {home_id}: {report.steps} steps, {report.backend_calls} backend calls, {report.cache_hits} cache hits")

    return PipelineResult(
        store=store,
        timeline=store.materialize(span_start, span_end),
        minute_predictions=[minute_predictions[k] for k in sorted(minute_predictions)],
        baseline=_baseline_segments(env_labels or [], [i.start for i in timeline], unit),
        report=report,
    )


# Inputs and outputs
def load_home_inputs(home: HomeConfig, config: RunConfig) -> HomeInputs:
    paths = home.paths
    metadata = load_metadata(paths.metadata)
    parsed = read_event_log(paths.events, metadata, strict=config.strict)
    ground_truth = parse_ground_truth(paths.ground_truth) if paths.ground_truth else []
    label_map = load_label_map(config.eval.label_map)
    if label_map is not None:
        ground_truth = apply_label_map(ground_truth, label_map)
    return HomeInputs(
        home_id=home.home_id,
        events=parsed.events,
        metadata=metadata,
        env_records=parse_predictions(paths.env_predictions, "env") if paths.env_predictions else [],
        wear_records=parse_predictions(paths.wear_predictions, "wear") if paths.wear_predictions else [],
        prior=load_prior(paths.prior, config.labels),
        ground_truth=ground_truth,
    )


class HomeTask(BaseModel):
    """One pipeline run: a whole home, or one blocked fold of it"""

    home_id: str
    span: Optional[Tuple[datetime, datetime]] = None
    fold: Optional[Fold] = None
    prior: Optional[ContextPrior] = None

    @property
    def name(self) -> str:
        return self.home_id if self.fold is None else f"{self.home_id}/fold_{self.fold.index}"


def plan_tasks(inputs: HomeInputs, config: RunConfig) -> List[HomeTask]:
    """Whole-home task, or one task per blocked test fold"""
    if not config.split.enabled:
        return [HomeTask(home_id=inputs.home_id)]

    unit = TimeUtils.unit_delta(config.window.unit_seconds)
    span_start, span_end = infer_span(inputs.events, [inputs.env_records, inputs.wear_records], unit)
    tasks = []
    for fold in blocked_splits(span_start, span_end, config.split.n_folds, config.split.test_days):
        prior = None
        if config.split.derive_prior and inputs.ground_truth:
            prior = derive_prior_from_history(
                inputs.ground_truth,
                train_spans=fold.train,
                events=inputs.events,
                metadata=inputs.metadata,
                allowed_labels=config.labels,
                min_instances=config.split.min_instances,
                secondary_share=config.split.secondary_share,
                max_habits=config.split.max_habits,
                min_bigram_count=config.split.min_bigram_count,
            )
        tasks.append(HomeTask(home_id=inputs.home_id, span=(fold.test_start, fold.test_end), fold=fold, prior=prior))
    logger.info(f"Home {inputs.home_id}: {len(tasks)} blocked folds")
    return tasks


def write_run_outputs(result: PipelineResult, directory: Path) -> None:
    """timeline.csv, snapshot.csv, minute_predictions.csv, baseline_env.csv, run_report.json"""
    directory.mkdir(parents=True, exist_ok=True)
    export_timeline_csv(directory / "timeline.csv", result.timeline)
    export_snapshot_csv(directory / "snapshot.csv", result.store.snapshot())

    rows = [
        {
            "timestamp": p.timestamp.isoformat(),
            "label": p.label,
            "alternative": p.alternative,
            "reason": p.reason,
        }
        for p in result.minute_predictions
    ]
    pd.DataFrame(rows, columns=["timestamp", "label", "alternative", "reason"]).to_csv(
        directory / "minute_predictions.csv", index=False, lineterminator="\n"
    )
    baseline = [{"start": s.start.isoformat(), "end": s.end.isoformat(), "label": s.label} for s in result.baseline]
    pd.DataFrame(baseline, columns=["start", "end", "label"]).to_csv(
        directory / "baseline_env.csv", index=False, lineterminator="\n"
    )
    (directory / "run_report.json").write_text(result.report.model_dump_json(indent=2), encoding="utf-8")


def evaluate_run(result: PipelineResult, ground_truth: Sequence[GroundTruthSegment], config: RunConfig) -> Dict:
    """Refined timeline, unrefined minute labels and env baseline scored on the run span"""
    unit = TimeUtils.unit_delta(config.window.unit_seconds)
    span = (result.report.span_start, result.report.span_end)
    minute_segments = _baseline_segments(
        [p.label for p in result.minute_predictions],
        [p.timestamp for p in result.minute_predictions],
        unit,
    )
    options = dict(
        unit=unit,
        label_space=config.labels,
        fixed_label_space=config.eval.fixed_label_space,
        span_start=span[0],
        span_end=span[1],
        emd_max_len=config.eval.emd_max_len,
        short_max_len=config.eval.short_max_len,
    )
    return {
        "refined": evaluate_timelines(result.timeline, ground_truth, **options),
        "cross_reference": evaluate_timelines(minute_segments, ground_truth, **options),
        "env_baseline": evaluate_timelines(result.baseline, ground_truth, **options),
    }


def run_task(
    task: HomeTask,
    inputs: HomeInputs,
    config: RunConfig,
    client: ReasoningClient,
) -> Tuple[RunReport, Optional[Dict]]:
    """Run one task and write its outputs under output_dir/<home>[/fold_i].

    Returns the run report and, when ground truth is available, the scores.
    """
    directory = Path(config.output_dir) / task.home_id
    if task.fold is not None:
        directory = directory / f"fold_{task.fold.index}"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "prompts.jsonl").unlink(missing_ok=True)
    client.run_log = RunLog(directory / "prompts.jsonl")

    result = run_pipeline(
        inputs, config, client,
        span=task.span,
        prior=task.prior,
        fold=task.fold.index if task.fold is not None else None,
    )
    write_run_outputs(result, directory)

    if inputs.ground_truth:
        try:
            scores = evaluate_run(result, inputs.ground_truth, config)
        except InsufficientDataError as e:
            logger.warning(f"{task.name}: not evaluated: {e}")
            return result.report, None
        (directory / "evaluation.json").write_text(json.dumps(scores, indent=2, default=str), encoding="utf-8")
        logger.info(
            f"{task.name}: accuracy refined {scores['refined']['accuracy']:.4f}, "
            f"env baseline {scores['env_baseline']['accuracy']:.4f}"
        )
        return result.report, scores
    return result.report, None
