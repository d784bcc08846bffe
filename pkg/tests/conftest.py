"""
Shared fixtures: the scripted 24-hour home, sensor metadata and event helpers
"""
from datetime import datetime, timedelta
from pathlib import Path

import pytest

from trace_har.config import load_config
from trace_har.inference import ReasoningClient, load_home_inputs
from trace_har.ingest import metadata_from_document, parse_value
from trace_har.backends import RuleBackend
from trace_har.schemas import SensorEvent

SEED = 20240601
FIXTURES = Path(__file__).parent / "fixtures"
HOME24 = FIXTURES / "home24"
GOLDEN = FIXTURES / "golden"
DAY = datetime(2024, 1, 1)
MINUTE = timedelta(minutes=1)

SENSORS = {
    "sensors": [
        {"sensor_id": "M_BED", "kind": "motion", "room": "bedroom"},
        {"sensor_id": "M_LIV", "kind": "motion", "room": "living room"},
        {"sensor_id": "M_KIT", "kind": "motion", "room": "kitchen"},
        {"sensor_id": "M_BATH", "kind": "motion", "room": "bathroom"},
        {"sensor_id": "D_FRONT", "kind": "contact", "room": "hallway", "object": "front door", "is_entrance": True},
        {"sensor_id": "D_CAB", "kind": "contact", "room": "kitchen", "object": "cabinet door"},
        {"sensor_id": "P_STOVE", "kind": "plug", "room": "kitchen", "object": "stove"},
        {"sensor_id": "T_KIT", "kind": "environmental", "room": "kitchen", "variable": "temperature", "unit": "°C"},
        {"sensor_id": "H_BATH", "kind": "environmental", "room": "bathroom", "variable": "humidity", "unit": "%RH"},
    ]
}


def at(hour: int, minute: int = 0, second: int = 0) -> datetime:
    return DAY.replace(hour=hour, minute=minute, second=second)


def make_event(timestamp: datetime, sensor_id: str, value: str, metadata=None) -> SensorEvent:
    sensor = metadata.get(sensor_id) if metadata else None
    return SensorEvent(timestamp=timestamp, sensor_id=sensor_id, value=parse_value(value, sensor))


@pytest.fixture
def metadata():
    return metadata_from_document(SENSORS)


@pytest.fixture
def event(metadata):
    def factory(timestamp: datetime, sensor_id: str, value: str = "ON") -> SensorEvent:
        return make_event(timestamp, sensor_id, value, metadata)
    return factory


@pytest.fixture
def home24_config(tmp_path):
    """Run configuration of the 24-hour fixture home writing under tmp_path"""
    return load_config(HOME24 / "config.yaml", [f"output_dir={tmp_path / 'output'}"])


@pytest.fixture
def home24_inputs(home24_config):
    return load_home_inputs(home24_config.homes[0], home24_config)


@pytest.fixture
def rule_client():
    return ReasoningClient(RuleBackend(), max_attempts=3)
