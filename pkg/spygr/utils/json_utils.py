"""
JSON utility functions for configs, manifests and reports.

File helpers return `(value, error_message)` tuples instead of raising so
callers decide how a missing or malformed file should surface. Reports are
written canonically (sorted keys, fixed float repr) so identical runs
produce identical bytes.
"""

import json
import logging
import math
import os
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """
    Convert NumPy scalars/arrays, enums and dataclass-like objects to plain JSON types.

    Non-finite floats become strings ("nan", "inf", "-inf") so reports stay valid JSON.
    """
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isfinite(value):
            return value
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if hasattr(value, "to_dict"):
        return to_jsonable(value.to_dict())
    return value


def dumps_canonical(data: Any, indent: int = 2) -> str:
    """Deterministic serialization: sorted keys, trailing newline."""
    return json.dumps(to_jsonable(data), indent=indent, sort_keys=True, ensure_ascii=False) + "\n"


def load_json_file(path: str) -> Tuple[Union[List, Dict, None], Optional[str]]:
    """
    Read a config, manifest or report.

    Returns:
        (parsed data, None) on success, (None, reason) otherwise.
    """
    if not path:
        return None, "empty path"
    if not os.path.isfile(path):
        return None, f"no such file: {path}"
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f), None
    except json.JSONDecodeError as e:
        reason = f"malformed JSON in {path} (line {e.lineno}, column {e.colno}): {e.msg}"
    except (OSError, UnicodeDecodeError) as e:
        reason = f"cannot read {path}: {type(e).__name__}: {e}"
    logger.debug(reason)
    return None, reason


def save_json_file(path: str, data: Any, indent: int = 2) -> Optional[str]:
    """
    Write `data` canonically, creating parent directories.

    Returns:
        None on success, the reason on failure.
    """
    if not path:
        return "empty path"
    if data is None:
        return "nothing to write"
    try:
        text = dumps_canonical(data, indent=indent)
    except TypeError as e:
        return f"not JSON serializable: {e}"
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        return f"cannot write {path}: {type(e).__name__}: {e}"
    return None
