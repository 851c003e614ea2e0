"""
Configuration layer: environment settings, flat key = value config files and
the package logger.
"""

import logging
import os
from typing import Dict, Mapping, Optional, Sequence

from dotenv import dotenv_values, load_dotenv

from src.errors import ArtifactIOError, ConfigError

# Load environment variables
load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


class Config:
    """Configuration manager for the application."""

    # Logging
    LOG_LEVEL: str = os.getenv("LITMAS_LOG_LEVEL", "INFO")

    # Write measured wall time into RunLog CSVs (breaks byte reproducibility)
    RECORD_TIMING: bool = _env_bool("LITMAS_RECORD_TIMING", "false")

    # Ablation arms trained in parallel threads
    ABLATION_WORKERS: int = int(os.getenv("LITMAS_ABLATION_WORKERS", "1"))

    # Groups (modality names or dataset tags) that receive min t-DCF
    SPEECH_GROUPS: tuple = tuple(
        g.strip() for g in os.getenv("LITMAS_SPEECH_GROUPS", "speech").split(",") if g.strip()
    )

    @classmethod
    def print_config(cls):
        """Print current configuration."""
        print("Current Configuration:")
        print(f"  Log level: {cls.LOG_LEVEL}")
        print(f"  Record timing: {cls.RECORD_TIMING}")
        print(f"  Ablation workers: {cls.ABLATION_WORKERS}")
        print(f"  Speech-style groups: {', '.join(cls.SPEECH_GROUPS)}")


# Create a config instance
config = Config()

_handler_installed = False


def get_logger(name: str) -> logging.Logger:
    """
    Return the package logger for a module.

    Args:
        name: Short module name, appended to the ``litmas`` namespace

    Returns:
        Configured logger
    """
    global _handler_installed
    root = logging.getLogger("litmas")
    if not _handler_installed:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
        root.setLevel(config.LOG_LEVEL.upper())
        root.propagate = False
        _handler_installed = True
    return root.getChild(name)


def load_config_file(path: str) -> Dict[str, str]:
    """
    Parse a flat ``key = value`` config file with ``#`` comments.

    Args:
        path: Path to the config file

    Returns:
        Mapping of keys to raw string values (file order)
    """
    if not os.path.exists(path):
        raise ArtifactIOError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip(): (value or "").strip() for key, value in values.items()}


def parse_overrides(items: Optional[Sequence[str]]) -> Dict[str, str]:
    """Turn ``["key=value", ...]`` command-line overrides into a mapping."""
    overrides: Dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


class _Required:
    def __repr__(self):
        return "REQUIRED"


_REQUIRED = _Required()
REQUIRED = _REQUIRED


class FieldReader:
    """Typed access to a raw config mapping that tracks unused keys."""

    def __init__(self, values: Mapping[str, str], source: str = "config"):
        self.values = dict(values)
        self.source = source
        self.used = set()

    def _raw(self, key: str, default):
        self.used.add(key)
        if key not in self.values or self.values[key] == "":
            if default is _REQUIRED:
                raise ConfigError(f"{self.source}: missing required field '{key}'")
            return None
        return self.values[key]

    def get_int(self, key: str, default=None):
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: field '{key}' expects an integer, got '{raw}'")

    def get_float(self, key: str, default=None):
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: field '{key}' expects a number, got '{raw}'")

    def get_bool(self, key: str, default=None):
        raw = self._raw(key, default)
        if raw is None:
            return default
        lowered = raw.lower()
        if lowered in {"1", "true", "yes", "on"}:
            return True
        if lowered in {"0", "false", "no", "off"}:
            return False
        raise ConfigError(f"{self.source}: field '{key}' expects a boolean, got '{raw}'")

    def get_str(self, key: str, default=None):
        raw = self._raw(key, default)
        return default if raw is None else raw

    def get_list(self, key: str, cast=str, default=None):
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return tuple(cast(part.strip()) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{self.source}: field '{key}' has an invalid list '{raw}'")

    def finish(self) -> None:
        """Reject keys nobody asked for (typos in config files)."""
        unknown = sorted(set(self.values) - self.used)
        if unknown:
            raise ConfigError(f"{self.source}: unknown field(s) {', '.join(unknown)}")
