import json
from types import SimpleNamespace

import openai
import pytest

from conftest import MINUTE, at
from trace_har.align import build_bundles, build_timeline
from trace_har.backends import (
    LangChainBackend,
    OpenAICompatibleBackend,
    RuleBackend,
    label_runs,
    make_backend,
    smooth_labels,
)
from trace_har.config import BackendConfig, EnvSettings
from trace_har.errors import BackendUnavailableError, ConfigError
from trace_har.reasoner import (
    parse_crossref_response,
    parse_refine_response,
    render_crossref_prompt,
    render_refine_prompt,
)
from trace_har.schemas import (
    AlignedInterval,
    ContextPrior,
    EvidenceBundle,
    MinutePrediction,
    ObservationSummary,
    PromptKind,
    PromptRequest,
    RefinementScope,
    TypicalLocation,
    VersionedSegment,
)
from trace_har.summarize import OUT_OF_HOME, summarize_timeline

LABELS = ["Sleep", "Relax", "Cook", "Eat", "Leave_Home", "Use_Bathroom", "Bed_to_Toilet", "Other"]


def bundle(minute, locations=(), interactions=(), env=None, wear=None, hour=7):
    start = at(hour, minute)
    summary = ObservationSummary(window_start=start, window_end=start + MINUTE,
                                 locations=list(locations), interactions=list(interactions))
    return EvidenceBundle(interval=AlignedInterval(index=minute, start=start, end=start + MINUTE),
                          summary=summary, env_label=env, wear_label=wear)


def cross_reference(bundles, prior=None):
    request = render_crossref_prompt(bundles, prior, LABELS, len(bundles), home_id="h")
    return parse_crossref_response(RuleBackend().complete(request), len(bundles), LABELS)


class TestRuleCrossReference:
    def test_wearable_sleep_throughout(self):
        predictions = cross_reference([bundle(m, ["bedroom"], env="Relax", wear="sleep") for m in range(10)])
        assert [p.label for p in predictions] == ["Sleep"] * 10

    def test_stove_interaction_is_direct_evidence(self):
        predictions = cross_reference([bundle(0, ["kitchen"], ["turn on the stove"], env="Relax", wear="sedentary")])
        assert predictions[0].label == "Cook"
        assert predictions[0].alternative == "Relax"
        assert "stove" in predictions[0].reason

    def test_no_sleep_without_wearable_sleep(self):
        predictions = cross_reference([bundle(0, ["bedroom"], env="Sleep", wear="sedentary")])
        assert predictions[0].label != "Sleep"

    def test_environmental_sleep_passes_without_wearable(self):
        predictions = cross_reference([bundle(0, ["bedroom"], env="Sleep")])
        assert predictions[0].label == "Sleep"

    def test_leave_home_needs_out_of_home_location(self):
        at_home = cross_reference([bundle(0, ["living room"], env="Leave_Home", wear="walking")])
        away = cross_reference([bundle(0, [OUT_OF_HOME], env="Relax", wear="walking")])
        assert at_home[0].label != "Leave_Home"
        assert away[0].label == "Leave_Home"

    def test_return_home_is_not_leave_home(self, metadata, event):
        events = [
            event(at(8, 0, 30), "D_FRONT", "CLOSE"),
            event(at(8, 10, 0), "D_FRONT", "OPEN"),
            event(at(8, 10, 20), "D_CAB", "OPEN"),
            event(at(8, 12, 30), "M_KIT"),
        ]
        timeline = build_timeline(at(8), at(8, 14), MINUTE)
        bundles = build_bundles(summarize_timeline(events, metadata, timeline), None, None, timeline)
        labels = [p.label for p in cross_reference(bundles)]
        assert labels[9] == "Leave_Home"
        assert "Leave_Home" not in labels[10:]

    def test_night_bathroom_is_bed_to_toilet(self):
        night = cross_reference([bundle(0, ["bathroom"], hour=3)])
        day = cross_reference([bundle(0, ["bathroom"], hour=11)])
        assert night[0].label == "Bed_to_Toilet"
        assert day[0].label == "Use_Bathroom"

    def test_prior_location_when_no_other_evidence(self):
        prior = ContextPrior(typical_locations=[TypicalLocation(activity="Eat", locations=["dining room"])])
        predictions = cross_reference([bundle(0, ["dining room"])], prior)
        assert predictions[0].label == "Eat"

    def test_no_evidence_uses_fallback_label(self):
        predictions = cross_reference([bundle(0)])
        assert predictions[0].label == "Other"


def refine_with_rule(labels, history=(), prior=None, min_units=2):
    scope_start = at(10)
    predictions = [
        MinutePrediction(timestamp=scope_start + i * MINUTE, label=label, alternative="Other")
        for i, label in enumerate(labels)
    ]
    scope = RefinementScope(
        window_start=scope_start,
        window_end=scope_start + len(labels) * MINUTE,
        horizon_start=scope_start - 20 * MINUTE,
        history=list(history),
    )
    request = render_refine_prompt(predictions, list(history), prior, LABELS, scope, 9, home_id="h")
    raw = RuleBackend(min_segment_units=min_units).complete(request)
    return parse_refine_response(raw, scope, LABELS, 9, "h")


class TestRuleRefinement:
    def test_isolated_minute_is_smoothed(self):
        segments = refine_with_rule(["Cook", "Cook", "Eat", "Cook", "Cook"])
        assert [(s.start, s.end, s.label) for s in segments] == [(at(10), at(10, 5), "Cook")]

    def test_single_other_inside_cook(self):
        segments = refine_with_rule(["Cook"] * 4 + ["Other"] + ["Cook"] * 5)
        assert len(segments) == 1 and segments[0].label == "Cook"
        assert segments[0].version == 9

    def test_continuation_reaches_into_history(self):
        history = [VersionedSegment(start=at(9, 45), end=at(10), label="Cook", version=8, home_id="h")]
        segments = refine_with_rule(["Cook"] * 10, history)
        assert segments[0].start == at(9, 45)

    def test_reach_is_capped_at_horizon(self):
        history = [VersionedSegment(start=at(9, 30), end=at(10), label="Cook", version=8, home_id="h")]
        segments = refine_with_rule(["Cook"] * 10, history)
        assert segments[0].start == at(9, 40)

    def test_different_label_keeps_boundary(self):
        history = [VersionedSegment(start=at(9, 50), end=at(10), label="Sleep", version=8, home_id="h")]
        segments = refine_with_rule(["Cook"] * 10, history)
        assert segments[0].start == at(10)

    def test_split_stage_one_only_smooths(self):
        predictions = [
            MinutePrediction(timestamp=at(10, i), label=label, alternative="Other")
            for i, label in enumerate(["Cook", "Eat", "Cook"])
        ]
        history = [VersionedSegment(start=at(9, 50), end=at(10), label="Cook", version=8)]
        scope = RefinementScope(window_start=at(10), window_end=at(10, 3), horizon_start=at(9, 40), history=history)
        request = render_refine_prompt(predictions, history, None, LABELS, scope, 9, stage=1)
        segments = parse_refine_response(RuleBackend().complete(request), scope, LABELS, 9)
        # no STEP 2 in the prompt, so no reach into history
        assert [(s.start, s.end, s.label) for s in segments] == [(at(10), at(10, 3), "Cook")]


class TestSmoothing:
    def test_label_runs(self):
        assert label_runs(["A", "A", "B", "A"]) == [("A", 0, 2), ("B", 2, 1), ("A", 3, 1)]

    def test_short_runs_join_longer_neighbour(self):
        assert smooth_labels(["A", "A", "A", "B", "C", "C"]) == ["A", "A", "A", "A", "C", "C"]

    def test_ties_go_left(self):
        assert smooth_labels(["A", "A", "B", "C", "C"]) == ["A", "A", "A", "C", "C"]

    def test_single_run_is_untouched(self):
        assert smooth_labels(["A"]) == ["A"]

    def test_min_units_one_is_identity(self):
        labels = ["A", "B", "A", "C"]
        assert smooth_labels(labels, 1) == labels

    def test_no_short_runs_remain(self):
        labels = ["A", "B", "C", "A", "B", "C", "C", "A", "B"]
        smoothed = smooth_labels(labels, 2)
        runs = label_runs(smoothed)
        assert len(smoothed) == len(labels)
        assert len(runs) == 1 or all(length >= 2 for _, _, length in runs)


def test_rule_backend_is_deterministic():
    bundles = [bundle(m, ["kitchen"], ["turn on the stove"] if m == 3 else [], env="Relax", wear="sedentary") for m in range(10)]
    request = render_crossref_prompt(bundles, None, LABELS, 10, home_id="h")
    assert RuleBackend().complete(request) == RuleBackend().complete(request)


class TestOpenAICompatibleBackend:
    def _backend(self, monkeypatch, create):
        backend = OpenAICompatibleBackend("http://localhost:9/v1", None, "test-model")
        monkeypatch.setattr(backend.client.chat.completions, "create", create)
        return backend

    def test_returns_message_content(self, monkeypatch):
        seen = {}

        def create(**kwargs):
            seen.update(kwargs)
            message = SimpleNamespace(content='{"ok": true}')
            return SimpleNamespace(choices=[SimpleNamespace(message=message)])

        backend = self._backend(monkeypatch, create)
        request = PromptRequest(kind=PromptKind.CROSS_REFERENCE, text="hello", trace_id="t")
        assert backend.complete(request) == '{"ok": true}'
        assert seen["model"] == "test-model"
        assert seen["temperature"] == 0.0
        assert seen["messages"] == [{"role": "user", "content": "hello"}]

    def test_connection_error_is_backend_unavailable(self, monkeypatch):
        def create(**kwargs):
            raise openai.APIConnectionError(request=None)

        backend = self._backend(monkeypatch, create)
        request = PromptRequest(kind=PromptKind.CROSS_REFERENCE, text="hello", trace_id="t")
        with pytest.raises(BackendUnavailableError):
            backend.complete(request)

    def test_missing_url(self):
        with pytest.raises(ConfigError):
            OpenAICompatibleBackend("", None, "m")


class TestMakeBackend:
    def test_rule(self):
        backend = make_backend(BackendConfig(kind="rule", min_segment_units=3), EnvSettings())
        assert isinstance(backend, RuleBackend)
        assert backend.min_segment_units == 3

    def test_remote_needs_model(self):
        with pytest.raises(ConfigError):
            make_backend(BackendConfig(kind="http"), EnvSettings(url="http://localhost:9/v1"))

    def test_env_model_wins(self):
        backend = make_backend(BackendConfig(kind="http", model="a"), EnvSettings(url="http://localhost:9/v1", model="b"))
        assert isinstance(backend, OpenAICompatibleBackend)
        assert backend.model == "b"

    def test_langchain(self):
        backend = make_backend(BackendConfig(kind="langchain", model="m"), EnvSettings(url="http://localhost:9/v1"))
        assert isinstance(backend, LangChainBackend)
        assert backend.name == "langchain"


def test_rule_prompt_payload_is_json():
    request = render_crossref_prompt([bundle(0, ["kitchen"], env="Cook")], None, LABELS, 1, home_id="h")
    payload = json.loads(RuleBackend().complete(request))
    assert payload["home_id"] == "h"
    assert payload["minute_predictions"][0]["labels"][0] == "Cook"
