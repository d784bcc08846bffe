"""
Run configuration: a YAML document validated into RunConfig, with
`--key.path=value` overrides and environment settings from .env
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigError
from .schemas import SourceToggles

logger = logging.getLogger(__name__)

DEFAULT_LABELS = [
    "Sleep",
    "Relax",
    "Cook",
    "Eat",
    "Work",
    "Bed_to_Toilet",
    "Leave_Home",
    "Enter_Home",
    "Use_Bathroom",
    "Personal_Hygiene",
    "Take_Medicine",
    "Other",
]


class PathsConfig(BaseModel):
    events: Optional[Path] = None
    env_predictions: Optional[Path] = None
    wear_predictions: Optional[Path] = None
    metadata: Optional[Path] = None
    prior: Optional[Path] = None
    ground_truth: Optional[Path] = None


class HomeConfig(BaseModel):
    home_id: str
    paths: PathsConfig = Field(default_factory=PathsConfig)


class WindowConfig(BaseModel):
    unit_seconds: float = 60.0
    window_units: int = 10
    # None means stride = window_units (non-overlapping steps)
    stride_units: Optional[int] = None
    history_windows: int = 2
    out_of_home_horizon_s: float = 180.0

    @property
    def stride(self) -> int:
        return self.stride_units or self.window_units

    @model_validator(mode="after")
    def _positive(self):
        if self.unit_seconds <= 0:
            raise ValueError("window.unit_seconds must be positive")
        if self.window_units < 1:
            raise ValueError("window.window_units must be >= 1")
        if self.stride_units is not None and not 1 <= self.stride_units <= self.window_units:
            raise ValueError("window.stride_units must be between 1 and window_units")
        if self.history_windows < 0:
            raise ValueError("window.history_windows must be >= 0")
        return self


class BackendConfig(BaseModel):
    kind: Literal["rule", "http", "langchain"] = "rule"
    model: Optional[str] = None
    temperature: Optional[float] = 0.0
    max_tokens: int = 4096
    timeout_s: float = 120.0
    max_attempts: int = 3
    retry_delay_s: float = 1.0
    min_segment_units: int = 2
    cache: bool = True
    check_reachable: bool = False


class SplitConfig(BaseModel):
    enabled: bool = False
    n_folds: int = 3
    test_days: int = 20
    derive_prior: bool = True
    min_instances: int = 3
    secondary_share: float = 0.25
    max_habits: int = 5
    min_bigram_count: int = 3


class EvalConfig(BaseModel):
    label_map: Optional[str] = None
    coarse_map: Optional[str] = None
    fixed_label_space: bool = True
    emd_max_len: int = 600
    short_max_len: int = 9
    plots: bool = False


class RunConfig(BaseModel):
    homes: List[HomeConfig] = Field(default_factory=list)
    labels: List[str] = Field(default_factory=lambda: list(DEFAULT_LABELS))
    fallback_label: str = "Other"
    window: WindowConfig = Field(default_factory=WindowConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    sources: SourceToggles = Field(default_factory=SourceToggles)
    refine_mode: Literal["unified", "split"] = "unified"
    split: SplitConfig = Field(default_factory=SplitConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: Path = Path("output")
    log_level: str = "INFO"
    strict: bool = False
    jobs: int = 1

    @model_validator(mode="after")
    def _labels(self):
        if not self.labels:
            raise ValueError("labels must not be empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels contain duplicates")
        if self.fallback_label not in self.labels:
            raise ValueError(f"fallback_label '{self.fallback_label}' is not in labels")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        return self

    def check_paths(self) -> None:
        """Every configured input file must exist; events and metadata are required"""
        if not self.homes:
            raise ConfigError("no homes configured", hint="add a 'homes' list to the config")
        for home in self.homes:
            for field in ("events", "metadata"):
                if getattr(home.paths, field) is None:
                    raise ConfigError(f"home '{home.home_id}': paths.{field} is required")
            for field, value in home.paths:
                if value is not None and not Path(value).is_file():
                    raise ConfigError(f"home '{home.home_id}': {field} file not found: {value}")


class EnvSettings(BaseModel):
    url: Optional[str] = None
    key: Optional[str] = None
    model: Optional[str] = None
    log_level: Optional[str] = None


def load_env_settings() -> EnvSettings:
    load_dotenv()
    return EnvSettings(
        url=os.getenv("TRACE_LLM_URL"),
        key=os.getenv("TRACE_LLM_KEY"),
        model=os.getenv("TRACE_LLM_MODEL"),
        log_level=os.getenv("LOG_LEVEL"),
    )


def parse_override(item: str) -> Tuple[str, Any]:
    text = item[2:] if item.startswith("--") else item
    if "=" not in text:
        raise ConfigError(f"override '{item}' is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def apply_override(document: Dict[str, Any], key: str, value: Any) -> None:
    """Set a dotted path; integer parts index into lists"""
    parts = key.split(".")
    node: Any = document
    for position, part in enumerate(parts):
        last = position == len(parts) - 1
        if isinstance(node, list):
            try:
                index = int(part)
                target = node[index]
            except (ValueError, IndexError):
                raise ConfigError(f"override '{key}': '{part}' is not a valid list index")
            if last:
                node[index] = value
            else:
                node = target
            continue
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}': cannot descend into '{part}'")
        if last:
            node[part] = value
        else:
            node = node.setdefault(part, {})


def _resolve_paths(document: Dict[str, Any], base: Path) -> None:
    for home in document.get("homes") or []:
        paths = home.get("paths") or {}
        for field, value in list(paths.items()):
            if value is not None and not Path(str(value)).is_absolute():
                paths[field] = str(base / str(value))
    output_dir = document.get("output_dir")
    if output_dir is not None and not Path(str(output_dir)).is_absolute():
        document["output_dir"] = str(base / str(output_dir))


def load_config(path: Optional[Path], overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults < file < overrides. Relative file paths resolve against the config's directory."""
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as handle:
                document = yaml.safe_load(handle) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}")
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _resolve_paths(document, path.parent)

    for item in overrides:
        key, value = parse_override(item)
        apply_override(document, key, value)

    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}")
    logger.debug(f"Configuration: {config.model_dump_json()}")
    return config
