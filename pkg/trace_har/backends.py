"""
Reasoning backends: a deterministic rule engine that reads the rendered
prompts back, an OpenAI-compatible HTTP client, and a LangChain chat model
"""
import json
import logging
import re
from datetime import datetime
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import openai
from langchain_core.messages import HumanMessage
from langchain_openai import ChatOpenAI
from openai import OpenAI

from .errors import BackendUnavailableError, ConfigError
from .schemas import PromptKind, PromptRequest
from .summarize import OUT_OF_HOME
from .utils import TimeUtils

logger = logging.getLogger(__name__)


class ReasoningBackend(Protocol):
    name: str
    model: str

    def complete(self, request: PromptRequest) -> str:
        ...


# Prompt block extraction
def _between(text: str, start_marker: str, end_marker: str) -> str:
    try:
        start = text.index(start_marker) + len(start_marker)
        end = text.index(end_marker, start)
    except ValueError:
        raise ConfigError(f"prompt is missing the '{start_marker.strip()}' block")
    return text[start:end]


def _line_value(text: str, pattern: str) -> str:
    match = re.search(pattern, text, re.MULTILINE)
    if match is None:
        raise ConfigError(f"prompt has no line matching {pattern!r}")
    return match.group(1)


def _labels(text: str) -> List[str]:
    return json.loads(_line_value(text, r"^Allowed labels: (\[.*\])$"))


def _context_locations(context: str) -> List[Tuple[str, List[str]]]:
    """(activity, locations) from 'A: usually occurs [around OBJ ]in L. (may also occur in L2)' lines"""
    entries = []
    for line in context.splitlines():
        match = re.match(r"^(.+?): usually occurs (?:around .+? )?in (.+?)\.(?: \(may also occur in (.+)\))?$", line)
        if not match:
            continue
        activity = match.group(1).split(" / ")[0]
        locations = [match.group(2)] + (match.group(3).split(" or ") if match.group(3) else [])
        entries.append((activity, locations))
    return entries


_COOKING_OBJECTS = ("stove", "stovetop", "oven", "microwave", "cooktop", "kettle")
_MEDICINE_OBJECTS = ("medicine", "pill", "medication")


class RuleBackend:
    """Deterministic stand-in for a language model that applies the prompt's
    priority rules to the blocks of the rendered prompt"""

    name = "rule"

    def __init__(self, min_segment_units: int = 2, model: str = "rule-v1"):
        self.min_segment_units = min_segment_units
        self.model = model

    def complete(self, request: PromptRequest) -> str:
        if request.kind == PromptKind.CROSS_REFERENCE:
            return self._cross_reference(request.text)
        return self._refine(request.text)

    # Cross-reference
    def _cross_reference(self, text: str) -> str:
        bundles = json.loads(_between(text, "The sensor observations are provided as structured JSON:\n", "\n### User Context"))
        context = _between(text, "The user routine profile, habits, and contextual priors are:\n", "\n## INTERNAL REASONING PROCESS")
        allowed = _labels(text)
        fallback = _line_value(text, r'conservative label: "([^"]+)"')
        home_id = _line_value(text, r"window for home (.*)\.$")
        prior_locations = _context_locations(context)

        items = []
        for bundle in bundles:
            label, alternative, reason = self._fuse(bundle, allowed, fallback, prior_locations)
            items.append({"timestamp": bundle["timestamp"], "labels": [label, alternative], "reason": reason})
        return json.dumps({"home_id": home_id, "minute_predictions": items}, ensure_ascii=False)

    def _fuse(
        self,
        bundle: Dict[str, Any],
        allowed: Sequence[str],
        fallback: str,
        prior_locations: Sequence[Tuple[str, List[str]]],
    ) -> Tuple[str, str, str]:
        wear = bundle.get("wear_prediction")
        env = bundle.get("env_prediction")
        summary = bundle.get("summary") or {}
        locations = summary.get("location") or []
        interactions = summary.get("interaction") or []
        stamp = TimeUtils.parse_timestamp(bundle["timestamp"])
        here = locations[-1] if locations else None

        wear_sleep = wear is not None and "sleep" in wear.lower()
        banned = set()
        if wear is not None and not wear_sleep:
            banned.add("Sleep")
        if here is not None and here != OUT_OF_HOME:
            banned.add("Leave_Home")

        candidates: List[Tuple[str, str]] = []
        if wear_sleep:
            candidates.append(("Sleep", "wearable shows sleep"))
        candidates.extend(self._direct_evidence(here, interactions, stamp))
        if env:
            candidates.append((env, f"environmental prediction {env}"))
        if here is not None:
            for activity, rooms in prior_locations:
                if here in rooms:
                    candidates.append((activity, f"{here} is a usual location for {activity}"))
                    break

        ranked = []
        for label, reason in candidates:
            if label in allowed and label not in banned and label not in [r[0] for r in ranked]:
                ranked.append((label, reason))
        if not ranked:
            return fallback, fallback, "no clear evidence"
        label, reason = ranked[0]
        alternative = ranked[1][0] if len(ranked) > 1 else fallback
        return label, alternative, reason

    @staticmethod
    def _direct_evidence(here: Optional[str], interactions: Sequence[str], stamp: datetime) -> List[Tuple[str, str]]:
        found = []
        if here == OUT_OF_HOME:
            found.append(("Leave_Home", "entrance used and no activity since"))
        for phrase in interactions:
            lowered = phrase.lower()
            if any(name in lowered for name in _COOKING_OBJECTS):
                found.append(("Cook", f"interaction: {phrase}"))
            elif any(name in lowered for name in _MEDICINE_OBJECTS):
                found.append(("Take_Medicine", f"interaction: {phrase}"))
        if here is not None and ("bathroom" in here.lower() or "toilet" in here.lower()):
            if stamp.hour >= 22 or stamp.hour < 6:
                found.append(("Bed_to_Toilet", f"night-time motion in {here}"))
            else:
                found.append(("Use_Bathroom", f"motion in {here}"))
        return found

    # Refinement
    def _refine(self, text: str) -> str:
        predictions = json.loads(_between(text, "The predictions are:\n", "\n### ACTIVITY_HISTORY"))
        history = json.loads(_between(text, "immediately before this window is:\n", "\n### USER_CONTEXT"))
        home_id = _line_value(text, r"^Home: (.*)$")
        scope_start = TimeUtils.parse_timestamp(_line_value(text, r"^Current refinement scope: (\S+) to \S+$"))
        scope_end = TimeUtils.parse_timestamp(_line_value(text, r"^Current refinement scope: \S+ to (\S+)$"))
        horizon = TimeUtils.parse_timestamp(_line_value(text, r"^Earliest revisable time: (\S+)$"))
        version = int(_line_value(text, r"^Output version: (\d+)$"))
        steps = {int(n) for n in re.findall(r"^### STEP (\d+):", text, re.MULTILINE)}

        if not predictions:
            return json.dumps({"revised_activities": []})
        unit = (scope_end - scope_start) / len(predictions)
        labels = [item["labels"][0] for item in predictions]
        if 1 in steps:
            labels = smooth_labels(labels, self.min_segment_units)

        runs = label_runs(labels)
        segments = []
        for label, first, length in runs:
            start = scope_start + first * unit
            segments.append([start, start + length * unit, label])

        if 2 in steps and history:
            last = max(history, key=lambda s: s["end_timestamp"])
            last_end = TimeUtils.parse_timestamp(last["end_timestamp"])
            if last_end == scope_start and last["label"] == segments[0][2]:
                segments[0][0] = max(TimeUtils.parse_timestamp(last["start_timestamp"]), horizon)

        return json.dumps({
            "revised_activities": [
                {
                    "home_id": home_id,
                    "start_timestamp": start.isoformat(),
                    "end_timestamp": end.isoformat(),
                    "version": version,
                    "label": label,
                }
                for start, end, label in segments
            ]
        }, ensure_ascii=False)


def label_runs(labels: Sequence[str]) -> List[Tuple[str, int, int]]:
    """(label, first index, length) per run of equal labels"""
    runs: List[Tuple[str, int, int]] = []
    for i, label in enumerate(labels):
        if runs and runs[-1][0] == label:
            runs[-1] = (label, runs[-1][1], runs[-1][2] + 1)
        else:
            runs.append((label, i, 1))
    return runs


def smooth_labels(labels: Sequence[str], min_units: int = 2) -> List[str]:
    """Absorb runs shorter than `min_units` into their longer neighbour (ties go left)"""
    runs = [[label, length] for label, _, length in label_runs(labels)]
    while len(runs) > 1:
        short = [i for i, (_, length) in enumerate(runs) if length < min_units]
        if not short:
            break
        i = min(short, key=lambda k: (runs[k][1], k))
        left = runs[i - 1] if i > 0 else None
        right = runs[i + 1] if i + 1 < len(runs) else None
        target = left if right is None or (left is not None and left[1] >= right[1]) else right
        target[1] += runs[i][1]
        del runs[i]
        merged = []
        for label, length in runs:
            if merged and merged[-1][0] == label:
                merged[-1][1] += length
            else:
                merged.append([label, length])
        runs = merged
    return [label for label, length in runs for _ in range(length)]


# Remote backends
_TRANSIENT = (
    openai.APIConnectionError,
    openai.APITimeoutError,
    openai.RateLimitError,
    openai.InternalServerError,
)


class OpenAICompatibleBackend:
    """Chat-completions client for any OpenAI-compatible endpoint"""

    name = "http"

    def __init__(self, base_url: str, api_key: Optional[str], model: str, timeout: float = 120.0):
        if not base_url:
            raise ConfigError("TRACE_LLM_URL is not set", hint="export TRACE_LLM_URL or add it to .env")
        self.model = model
        self.client = OpenAI(base_url=base_url, api_key=api_key or "EMPTY", timeout=timeout, max_retries=0)
        logger.info(f"HTTP backend initialized for model {model} at {base_url}")

    def complete(self, request: PromptRequest) -> str:
        params: Dict[str, Any] = {"max_tokens": request.decode_params.max_tokens}
        if request.decode_params.temperature is not None:
            params["temperature"] = request.decode_params.temperature
        try:
            response = self.client.chat.completions.create(
                model=self.model,
                messages=[{"role": "user", "content": request.text}],
                **params,
            )
        except _TRANSIENT as e:
            raise BackendUnavailableError(f"{type(e).__name__}: {e}")
        except openai.APIStatusError as e:
            raise BackendUnavailableError(f"HTTP {e.status_code}: {e}")
        return response.choices[0].message.content or ""


class LangChainBackend:
    """Same wire protocol through langchain's ChatOpenAI"""

    name = "langchain"

    def __init__(self, base_url: str, api_key: Optional[str], model: str, timeout: float = 120.0,
                 temperature: Optional[float] = 0.0, max_tokens: int = 4096):
        if not base_url:
            raise ConfigError("TRACE_LLM_URL is not set", hint="export TRACE_LLM_URL or add it to .env")
        self.model = model
        kwargs: Dict[str, Any] = {}
        if temperature is not None:
            kwargs["temperature"] = temperature
        self.chat_llm = ChatOpenAI(
            model=model,
            base_url=base_url,
            api_key=api_key or "EMPTY",
            timeout=timeout,
            max_retries=0,
            max_tokens=max_tokens,
            **kwargs,
        )
        logger.info(f"LangChain backend initialized for model {model}")

    def complete(self, request: PromptRequest) -> str:
        try:
            message = self.chat_llm.invoke([HumanMessage(content=request.text)])
        except _TRANSIENT as e:
            raise BackendUnavailableError(f"{type(e).__name__}: {e}")
        except openai.APIStatusError as e:
            raise BackendUnavailableError(f"HTTP {e.status_code}: {e}")
        content = message.content
        if isinstance(content, list):
            content = "".join(part if isinstance(part, str) else part.get("text", "") for part in content)
        return content or ""


def make_backend(settings, env) -> ReasoningBackend:
    """Build the backend named in the run config; `env` supplies URL/key/model overrides"""
    kind = settings.kind
    if kind == "rule":
        return RuleBackend(min_segment_units=settings.min_segment_units)
    model = env.model or settings.model
    if not model:
        raise ConfigError("no model configured for the remote backend", hint="set backend.model or TRACE_LLM_MODEL")
    if kind == "http":
        return OpenAICompatibleBackend(env.url, env.key, model, timeout=settings.timeout_s)
    if kind == "langchain":
        return LangChainBackend(
            env.url, env.key, model,
            timeout=settings.timeout_s,
            temperature=settings.temperature,
            max_tokens=settings.max_tokens,
        )
    raise ConfigError(f"unknown backend '{kind}'")
