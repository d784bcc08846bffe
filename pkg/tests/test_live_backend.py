"""
One Milan blocked fold against a real OpenAI-compatible endpoint.

TRACE_MILAN_DIR must hold a run config `config.yaml` for the Milan home
(events, metadata, env/wear predictions, ground truth, eval.label_map: milan).
"""
import os
from pathlib import Path

import pytest

from trace_har.backends import make_backend
from trace_har.config import load_config, load_env_settings
from trace_har.inference import ReasoningClient, load_home_inputs, plan_tasks, run_task

pytestmark = [
    pytest.mark.live,
    pytest.mark.skipif(
        not (os.getenv("TRACE_LLM_URL") and os.getenv("TRACE_MILAN_DIR")),
        reason="TRACE_LLM_URL and TRACE_MILAN_DIR are not set",
    ),
]


def test_refined_accuracy_beats_env_baseline(tmp_path):
    config_path = Path(os.environ["TRACE_MILAN_DIR"]) / "config.yaml"
    config = load_config(config_path, [
        "backend.kind=http",
        "split.enabled=true",
        f"output_dir={tmp_path}",
    ])
    home = config.homes[0]
    inputs = load_home_inputs(home, config)
    task = plan_tasks(inputs, config)[0]
    client = ReasoningClient(make_backend(config.backend, load_env_settings()), max_attempts=config.backend.max_attempts)

    report, scores = run_task(task, inputs, config, client)

    assert report.unavailable_windows < report.steps
    assert scores is not None
    # expected gap is double-digit, only the direction is asserted
    assert scores["refined"]["accuracy"] > scores["env_baseline"]["accuracy"]
