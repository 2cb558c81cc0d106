"""
Environment and run-configuration loading.

A run's configuration is resolved in three layers: built-in defaults, then
an optional JSON config file, then command-line flags. Later layers win and
keys nobody declared are rejected.
"""

import logging
import os
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from ..core.errors import ConfigError
from .json_utils import load_json_file

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "SPYGR_THREADS"
PROJECT_ENV_FILE = os.path.join(os.path.dirname(os.path.dirname(__file__)), "spygr.env")


def load_environment(env_file: Optional[str] = None) -> None:
    """Load `.env` from the working directory, then the package env file (overriding)."""
    load_dotenv()

    env_path = env_file or PROJECT_ENV_FILE
    if os.path.exists(env_path):
        load_dotenv(env_path, override=True)
        logger.info(f"Loaded environment from {env_path}")

    logger.debug("Environment variables loaded")


def get_thread_count() -> int:
    """Worker count from SPYGR_THREADS (default 1)."""
    raw = os.getenv(THREADS_ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV_VAR, f"expected a positive integer, got '{raw}'") from None
    if value < 1:
        raise ConfigError(THREADS_ENV_VAR, f"expected a positive integer, got {value}")
    return value


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Parse a JSON config file; an absent path yields an empty mapping."""
    if not path:
        return {}
    data, error = load_json_file(path)
    if error:
        raise ConfigError("config", error)
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object, got {type(data).__name__}")
    logger.info(f"Loaded {len(data)} config keys from {path}")
    return data


def resolve_config(
    defaults: Mapping[str, Any],
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Merge defaults <- config file <- flags.

    Args:
        defaults: every accepted key with its default value
        file_values: values read from --config
        overrides: flag values; None means the flag was not given

    Returns:
        Resolved configuration with the keys of `defaults`.

    Raises:
        ConfigError: a config-file key is not in `defaults`.
    """
    resolved = dict(defaults)
    unknown = sorted(set(file_values or {}) - set(defaults))
    if unknown:
        raise ConfigError("config", f"unknown keys {unknown}; accepted: {sorted(defaults)}")
    resolved.update(file_values or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in defaults:
            raise ConfigError(key, "flag is not accepted by this subcommand")
        resolved[key] = value
    return resolved


def parse_int_list(text: str, field: str, length: Optional[int] = None) -> list:
    """'1,512,97,97' -> [1, 512, 97, 97]."""
    if isinstance(text, (list, tuple)):
        values = list(text)
    else:
        try:
            values = [int(part) for part in str(text).split(",") if part.strip()]
        except ValueError:
            raise ConfigError(field, f"expected comma-separated integers, got '{text}'") from None
    if length is not None and len(values) != length:
        raise ConfigError(field, f"expected {length} integers, got {len(values)}")
    if any(int(v) < 0 for v in values):
        raise ConfigError(field, f"values must be non-negative, got {values}")
    return [int(v) for v in values]
