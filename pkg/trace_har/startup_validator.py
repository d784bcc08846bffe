#!/usr/bin/env python3
"""
Startup validation for a pipeline run
"""
import logging
import os
from pathlib import Path
from typing import Optional

import requests

from .config import EnvSettings, RunConfig
from .database import CACHE_FILENAME, init_database, test_database_connection
from .errors import ConfigError

logger = logging.getLogger(__name__)


class StartupValidator:
    """Validates inputs, output directory and backend before a run starts"""

    def __init__(self, config: RunConfig, env: EnvSettings, check_backend: Optional[bool] = None):
        self.config = config
        self.env = env
        self.check_backend = config.backend.check_reachable if check_backend is None else check_backend
        self.errors = []
        self.warnings = []

    def validate_input_files(self):
        """Configured input files exist"""
        logger.info("Validating input files...")
        try:
            self.config.check_paths()
        except ConfigError as e:
            self.errors.append(str(e))
            return
        for home in self.config.homes:
            missing = [name for name in ("env_predictions", "wear_predictions", "prior", "ground_truth")
                       if getattr(home.paths, name) is None]
            if missing:
                logger.info(f"[INFO] {home.home_id}: no {', '.join(missing)}")
            logger.info(f"[OK] {home.home_id}: input files found")

    def validate_output_directory(self):
        """Output directory can be created and written"""
        logger.info("Validating output directory...")
        output_dir = Path(self.config.output_dir)
        try:
            output_dir.mkdir(parents=True, exist_ok=True)
            marker = output_dir / ".write_test"
            marker.write_text("test", encoding="utf-8")
            marker.unlink()
            logger.info(f"[OK] {output_dir} is writable")
        except OSError as e:
            self.errors.append(f"Cannot write to output directory {output_dir}: {e}")

    def validate_environment_variables(self):
        """Remote backends need an endpoint; a key is optional for local servers"""
        logger.info("Validating environment variables...")
        if self.config.backend.kind == "rule":
            logger.info("[OK] rule backend needs no environment")
            return
        if not self.env.url:
            self.errors.append(f"Missing required environment variable: TRACE_LLM_URL ({self.config.backend.kind} backend endpoint)")
        else:
            logger.info("[OK] TRACE_LLM_URL is set")
        if not self.env.key:
            self.warnings.append("TRACE_LLM_KEY not set, calling the endpoint without a key")
        if not (self.env.model or self.config.backend.model):
            self.errors.append("No model configured: set backend.model or TRACE_LLM_MODEL")
        if os.getenv("LOG_LEVEL"):
            logger.info(f"[INFO] LOG_LEVEL is set: {os.getenv('LOG_LEVEL')}")

    def validate_backend_reachable(self):
        """GET {TRACE_LLM_URL}/models"""
        if not self.check_backend or self.config.backend.kind == "rule" or not self.env.url:
            return
        logger.info("Validating backend reachability...")
        headers = {"Authorization": f"Bearer {self.env.key}"} if self.env.key else {}
        try:
            response = requests.get(f"{self.env.url.rstrip('/')}/models", headers=headers, timeout=10)
        except requests.exceptions.Timeout:
            self.errors.append(f"Backend at {self.env.url} timed out")
            return
        except requests.exceptions.RequestException as e:
            self.errors.append(f"Backend at {self.env.url} is unreachable: {e}")
            return

        if response.status_code == 200:
            logger.info("[OK] Backend reachable")
        elif response.status_code == 401:
            self.errors.append("Backend rejected TRACE_LLM_KEY")
        elif response.status_code == 404:
            self.warnings.append("Backend has no /models listing; reachability not confirmed")
        else:
            self.errors.append(f"Backend error: {response.status_code} - {response.text[:200]}")

    def validate_cache(self):
        """Response cache database opens"""
        if not self.config.backend.cache or self.errors:
            return
        logger.info("Validating response cache...")
        try:
            engine, _ = init_database(Path(self.config.output_dir) / CACHE_FILENAME)
        except Exception as e:
            self.errors.append(f"Cannot open response cache: {e}")
            return
        ok, message = test_database_connection(engine)
        engine.dispose()
        if ok:
            logger.info("[OK] Response cache ready")
        else:
            self.errors.append(f"Response cache unusable: {message}")

    @property
    def backend_unreachable(self) -> bool:
        return any(e.startswith("Backend") for e in self.errors)

    def run_validation(self) -> bool:
        """Run all validation checks"""
        logger.info("Starting startup validation...")

        self.validate_input_files()
        self.validate_output_directory()
        self.validate_environment_variables()
        self.validate_backend_reachable()
        self.validate_cache()

        if self.errors:
            logger.error(f"[ERROR] {len(self.errors)} ERRORS FOUND:")
            for error in self.errors:
                logger.error(f"  - {error}")

        if self.warnings:
            logger.warning(f"[WARNING] {len(self.warnings)} WARNINGS:")
            for warning in self.warnings:
                logger.warning(f"  - {warning}")

        if not self.errors:
            logger.info("[SUCCESS] Ready to run")
            return True
        logger.error("[ERROR] Run cannot start due to errors")
        return False
