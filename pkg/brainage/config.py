"""
Configuration settings for the brain age pipeline.

Runtime settings come from environment variables; run configuration comes from
one JSON file validated by the models in ``brainage.schemas``.
"""

import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from .exceptions import ConfigError
from .schemas import RunConfig


class Settings:
    """Process-wide settings and environment overrides."""

    def __init__(self):
        # Base directories
        self.base_dir = Path(__file__).parent.parent
        self.output_dir = Path(
            os.getenv("BRAINAGE_OUTPUT_DIR", self.base_dir / "output")
        ).expanduser()

        # Application metadata written into every report header
        self.app_title = "Brain Age Estimation"
        self.app_version = "1.0.0"

        # Worker settings
        self.n_jobs = max(1, int(os.getenv("BRAINAGE_N_JOBS", "1")))
        self.log_level = os.getenv("BRAINAGE_LOG_LEVEL", "INFO").upper()

        self._workbook_enabled_override: Optional[bool] = None

    @property
    def workbook_enabled(self) -> bool:
        """Whether .xlsx companions of the CSV reports should be written."""
        if self._workbook_enabled_override is not None:
            return self._workbook_enabled_override
        return os.getenv("BRAINAGE_DISABLE_WORKBOOK", "false").lower() != "true"

    def set_workbook_enabled(self, enabled: bool) -> None:
        """Override the workbook toggle at runtime."""
        self._workbook_enabled_override = bool(enabled)

    def clear_workbook_override(self) -> None:
        """Clear any workbook override, falling back to the environment variable."""
        self._workbook_enabled_override = None


def create_output_directory(path: Path) -> Path:
    """Create a run output directory, tolerating read-only parents."""
    logger = logging.getLogger("brainage")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except PermissionError:
        logger.warning(
            "Could not create output directory %s due to a permission error. "
            "Please ensure the user running the pipeline has write access.",
            path,
        )
        raise
    return path


def load_run_config(path: Union[str, Path], seed: Optional[int] = None) -> RunConfig:
    """Read, validate and resolve a run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON in {path}: {exc}") from exc
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config {path}: {exc}") from exc
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    return config.resolved()


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get the settings instance."""
    return settings
