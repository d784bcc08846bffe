import json
from datetime import timedelta

import pytest

from conftest import GOLDEN, MINUTE, at
from trace_har.errors import (
    BackendUnavailableError,
    CountMismatchError,
    CoverageGapError,
    IllegalLabelError,
    OverlapWithinResponseError,
    ParseFailureError,
    PromptRenderError,
    WindowSizeMismatchError,
)
from trace_har.reasoner import (
    RunLog,
    call_with_retry,
    canonical_label,
    crossref_fallback,
    fill_template,
    load_template,
    parse_crossref_response,
    parse_refine_response,
    refine_fallback,
    render_crossref_prompt,
    render_refine_prompt,
    sanitize_response,
    segments_from_labels,
    split_refine_template,
)
from trace_har.schemas import (
    AlignedInterval,
    ContextPrior,
    EnvironmentStat,
    EvidenceBundle,
    LayoutDescription,
    MinutePrediction,
    ObservationSummary,
    PromptKind,
    PromptRequest,
    RefinementScope,
    SourceToggles,
    TypicalLocation,
    TypicalTime,
    VersionedSegment,
)

LABELS = ["Sleep", "Cook", "Relax", "Other"]


# Golden input
def golden_bundles():
    environment = {"temperature": EnvironmentStat(min=21.5, max=21.5, mean=21.5, unit="°C")}
    first = ObservationSummary(
        window_start=at(7), window_end=at(7, 1),
        locations=["kitchen"], interactions=["turn on the stove"], environment=environment,
    )
    second = ObservationSummary(
        window_start=at(7, 1), window_end=at(7, 2),
        locations=["kitchen"], environment=environment, carried_location=True,
    )
    return [
        EvidenceBundle(interval=AlignedInterval(index=0, start=at(7), end=at(7, 1)), summary=first,
                       env_label="Cook", wear_label="sedentary"),
        EvidenceBundle(interval=AlignedInterval(index=1, start=at(7, 1), end=at(7, 2)), summary=second,
                       env_label="Cook"),
    ]


def golden_prior():
    return ContextPrior(
        layout=LayoutDescription(house_type="one-bedroom apartment", rooms={"kitchen": ["stove", "fridge"], "bedroom": []}),
        typical_times=[
            TypicalTime(activity="Cook", around=["07:00", "18:00"]),
            TypicalTime(activity="Sleep", start="23:00", end="07:00"),
        ],
        typical_locations=[
            TypicalLocation(activity="Cook", locations=["kitchen"], object="stove"),
            TypicalLocation(activity="Relax", locations=["living room", "bedroom"]),
        ],
        habits=["Eat: usually occurs after Cook."],
    )


def golden_predictions():
    return [
        MinutePrediction(timestamp=at(7), label="Cook", alternative="Relax", reason="interaction: turn on the stove"),
        MinutePrediction(timestamp=at(7, 1), label="Cook", alternative="Relax", reason="environmental prediction Cook"),
    ]


def golden_scope():
    history = [VersionedSegment(start=at(6, 58), end=at(7), label="Sleep", version=3, home_id="golden")]
    return RefinementScope(window_start=at(7), window_end=at(7, 2), horizon_start=at(6, 58), history=history)


def render_golden_refine(stage=None):
    scope = golden_scope()
    return render_refine_prompt(golden_predictions(), scope.history, golden_prior(), LABELS, scope, 4,
                                home_id="golden", stage=stage)


class TestGoldenPrompts:
    def test_cross_reference_prompt_matches_golden_file(self):
        request = render_crossref_prompt(golden_bundles(), golden_prior(), LABELS, 2, home_id="golden")
        assert request.text == (GOLDEN / "crossref_prompt.txt").read_text(encoding="utf-8")
        assert request.kind == PromptKind.CROSS_REFERENCE
        assert request.trace_id == "golden:crossref:2024-01-01T07:00:00"

    def test_refine_prompt_matches_golden_file(self):
        request = render_golden_refine()
        assert request.text == (GOLDEN / "refine_prompt.txt").read_text(encoding="utf-8")
        assert request.kind == PromptKind.REFINEMENT

    def test_cross_reference_sections_present(self):
        text = (GOLDEN / "crossref_prompt.txt").read_text(encoding="utf-8")
        for header in (
            "## INPUT",
            "### Sensor Sources",
            "### Sensor Data",
            "### User Context",
            "## INTERNAL REASONING PROCESS",
            '4. Only output "Sleep" if the wearable shows sleep.',
            '5. Do not output "Leave_Home" if the location is home.',
            "## OUTPUT FORMAT (STRICT JSON ONLY)",
            '"minute_predictions"',
        ):
            assert header in text

    def test_refine_sections_present(self):
        text = (GOLDEN / "refine_prompt.txt").read_text(encoding="utf-8")
        for header in (
            "### STEP 1: Local Temporal Smoothing",
            "### STEP 2: Cross-Window Continuity",
            "### STEP 3: Context and Routine Alignment",
            "### STEP 4: Versioned Output",
            "## CRITICAL REQUIREMENTS",
            '"revised_activities"',
        ):
            assert header in text

    def test_rendering_is_deterministic(self):
        first = render_crossref_prompt(golden_bundles(), golden_prior(), LABELS, 2, home_id="golden")
        second = render_crossref_prompt(golden_bundles(), golden_prior(), LABELS, 2, home_id="golden")
        assert first.prompt_sha256 == second.prompt_sha256


class TestRendering:
    def test_window_size_must_match_bundles(self):
        with pytest.raises(WindowSizeMismatchError):
            render_crossref_prompt(golden_bundles(), None, LABELS, 3)

    def test_disabled_sources_render_null(self):
        sources = SourceToggles(env=False, wear=True, summary=False, context=False)
        text = render_crossref_prompt(golden_bundles(), golden_prior(), LABELS, 2, sources=sources).text
        sensor = json.loads(text.split("structured JSON:\n", 1)[1].split("\n### User Context", 1)[0])
        assert [b["env_prediction"] for b in sensor] == [None, None]
        assert [b["summary"] for b in sensor] == [None, None]
        assert sensor[0]["wear_prediction"] == "sedentary"
        assert "No user context available." in text
        assert "- env:" not in text and "- wear:" in text

    def test_split_stage_keeps_one_step_and_output_rules(self):
        text = render_golden_refine(stage=2).text
        assert "### STEP 2: Cross-Window Continuity" in text
        assert "### STEP 4: Versioned Output" in text
        assert "### STEP 1:" not in text and "### STEP 3:" not in text
        assert "## CRITICAL REQUIREMENTS" in text

    def test_split_stage_out_of_range(self):
        with pytest.raises(PromptRenderError):
            split_refine_template(load_template("refine"), 4)

    def test_fill_template_rejects_missing_values(self):
        with pytest.raises(PromptRenderError):
            fill_template("{{A}} and {{B}}", {"A": "x"})

    def test_substituted_text_containing_placeholder_is_an_error(self):
        with pytest.raises(PromptRenderError):
            fill_template("{{A}}", {"A": "{{B}}"})


def crossref_payload(n, label="Cook", start=at(7)):
    return json.dumps({"home_id": "h", "minute_predictions": [
        {"timestamp": (start + i * MINUTE).isoformat(), "labels": [label, "Other"], "reason": "r"}
        for i in range(n)
    ]})


class TestParseCrossReference:
    def test_valid_payload(self):
        predictions = parse_crossref_response(crossref_payload(3), 3, LABELS)
        assert [p.label for p in predictions] == ["Cook"] * 3
        assert predictions[2].timestamp == at(7, 2)
        assert predictions[0].alternative == "Other"

    def test_fenced_and_chatty_response(self):
        raw = "Sure! Here it is:\n```json\n" + crossref_payload(2) + "\n```\nHope that helps."
        assert len(parse_crossref_response(raw, 2, LABELS)) == 2

    def test_truncated_json_is_repaired(self):
        raw = crossref_payload(2)[:-2]
        predictions = parse_crossref_response(raw, 2, LABELS)
        assert len(predictions) == 2

    def test_count_mismatch(self):
        with pytest.raises(CountMismatchError):
            parse_crossref_response(crossref_payload(9), 10, LABELS)

    def test_illegal_label(self):
        with pytest.raises(IllegalLabelError):
            parse_crossref_response(crossref_payload(2, label="Dance"), 2, LABELS)

    def test_label_variants_are_canonicalised(self):
        assert canonical_label("leave home", ["Leave_Home", "Other"]) == "Leave_Home"

    def test_expected_timestamps_override_returned_ones(self):
        predictions = parse_crossref_response(crossref_payload(2, start=at(9)), 2, LABELS, [at(7), at(7, 1)])
        assert [p.timestamp for p in predictions] == [at(7), at(7, 1)]

    def test_no_json(self):
        with pytest.raises(ParseFailureError):
            sanitize_response("I cannot help with that.")


def refine_payload(*segments, version=5):
    return json.dumps({"revised_activities": [
        {"home_id": "h", "start_timestamp": a.isoformat(), "end_timestamp": b.isoformat(), "version": version, "label": label}
        for a, b, label in segments
    ]})


class TestParseRefine:
    scope = RefinementScope(window_start=at(7), window_end=at(7, 10), horizon_start=at(6, 50))

    def test_tiling_segments(self):
        raw = refine_payload((at(7), at(7, 4), "Cook"), (at(7, 4), at(7, 10), "Eat"))
        segments = parse_refine_response(raw, self.scope, LABELS + ["Eat"], 5, "h")
        assert [(s.start, s.end, s.label, s.version) for s in segments] == [
            (at(7), at(7, 4), "Cook", 5),
            (at(7, 4), at(7, 10), "Eat", 5),
        ]

    def test_reach_back_is_capped_at_horizon(self):
        raw = refine_payload((at(6, 30), at(7, 10), "Cook"))
        segments = parse_refine_response(raw, self.scope, LABELS, 5)
        assert segments[0].start == at(6, 50)

    def test_segments_are_clipped_at_window_end(self):
        raw = refine_payload((at(7), at(7, 20), "Cook"))
        assert parse_refine_response(raw, self.scope, LABELS, 5)[0].end == at(7, 10)

    def test_gap_inside_scope(self):
        raw = refine_payload((at(7), at(7, 4), "Cook"), (at(7, 5), at(7, 10), "Relax"))
        with pytest.raises(CoverageGapError):
            parse_refine_response(raw, self.scope, LABELS, 5)

    def test_overlap_within_response(self):
        raw = refine_payload((at(7), at(7, 6), "Cook"), (at(7, 5), at(7, 10), "Relax"))
        with pytest.raises(OverlapWithinResponseError):
            parse_refine_response(raw, self.scope, LABELS, 5)

    def test_non_integral_version(self):
        raw = refine_payload((at(7), at(7, 10), "Cook"), version="five")
        with pytest.raises(ParseFailureError):
            parse_refine_response(raw, self.scope, LABELS, 5)

    def test_empty_activity_list(self):
        with pytest.raises(ParseFailureError):
            parse_refine_response('{"revised_activities": []}', self.scope, LABELS, 5)


class TestFallbacks:
    def test_crossref_fallback_passes_env_through(self):
        predictions = crossref_fallback(golden_bundles(), LABELS)
        assert [p.label for p in predictions] == ["Cook", "Cook"]
        assert predictions[0].reason.startswith("fallback")

    def test_crossref_fallback_without_env(self):
        predictions = crossref_fallback(golden_bundles(), LABELS, sources=SourceToggles(env=False))
        assert [p.label for p in predictions] == ["Other", "Other"]

    def test_refine_fallback_coalesces(self):
        predictions = [
            MinutePrediction(timestamp=at(7, i), label=label, alternative="Other")
            for i, label in enumerate(["Cook", "Cook", "Eat"])
        ]
        segments = refine_fallback(predictions, MINUTE, 7, "h")
        assert [(s.start, s.end, s.label, s.version) for s in segments] == [
            (at(7), at(7, 2), "Cook", 7),
            (at(7, 2), at(7, 3), "Eat", 7),
        ]

    def test_segments_from_labels_uses_unit_for_last_segment(self):
        segments = segments_from_labels([at(7)], ["Cook"], timedelta(seconds=30), 1)
        assert segments[0].end == at(7, 0, 30)


class ScriptedBackend:
    """Replies from a list; an exception instance is raised instead of returned"""

    name = "scripted"
    model = "m"

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, request):
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        if isinstance(reply, Exception):
            raise reply
        return reply


class MemoryCache:
    def __init__(self):
        self.rows = {}

    def get(self, sha, backend, model, kind):
        return self.rows.get((sha, backend, model, kind))

    def put(self, sha, backend, model, kind, response):
        self.rows[(sha, backend, model, kind)] = response


REQUEST = PromptRequest(kind=PromptKind.CROSS_REFERENCE, text="prompt", trace_id="h:crossref:t")


def parse_two(raw):
    return parse_crossref_response(raw, 2, LABELS)


def fallback_two():
    return ["fallback"]


class TestRetryPolicy:
    def test_retries_until_parse_succeeds(self):
        backend = ScriptedBackend(["not json", crossref_payload(3), crossref_payload(2)])
        response = call_with_retry(REQUEST, backend, parse_two, fallback_two, max_attempts=3)
        assert response.attempt_count == 3
        assert not response.degraded
        assert len(response.parsed) == 2

    def test_degrades_after_max_attempts(self, tmp_path):
        backend = ScriptedBackend(["nope"])
        log = RunLog(tmp_path / "prompts.jsonl")
        response = call_with_retry(REQUEST, backend, parse_two, fallback_two, max_attempts=3, run_log=log)
        assert response.degraded
        assert response.parsed == ["fallback"]
        assert backend.calls == 3
        entry = json.loads((tmp_path / "prompts.jsonl").read_text(encoding="utf-8"))
        assert entry["degraded"] and entry["trace_id"] == "h:crossref:t"
        assert entry["prompt_sha256"] == REQUEST.prompt_sha256

    def test_transport_failures_on_every_attempt_raise(self):
        backend = ScriptedBackend([BackendUnavailableError("connection refused")])
        with pytest.raises(BackendUnavailableError):
            call_with_retry(REQUEST, backend, parse_two, fallback_two, max_attempts=2)
        assert backend.calls == 2

    def test_mixed_failures_degrade_instead_of_raising(self):
        backend = ScriptedBackend([BackendUnavailableError("timeout"), "nope"])
        response = call_with_retry(REQUEST, backend, parse_two, fallback_two, max_attempts=2)
        assert response.degraded

    def test_cache_hit_skips_backend(self):
        cache = MemoryCache()
        first = ScriptedBackend([crossref_payload(2)])
        call_with_retry(REQUEST, first, parse_two, fallback_two, cache=cache)
        second = ScriptedBackend(["should not be called"])
        response = call_with_retry(REQUEST, second, parse_two, fallback_two, cache=cache)
        assert response.cached
        assert second.calls == 0

    def test_degraded_responses_are_not_cached(self):
        cache = MemoryCache()
        call_with_retry(REQUEST, ScriptedBackend(["nope"]), parse_two, fallback_two, max_attempts=1, cache=cache)
        assert cache.rows == {}
