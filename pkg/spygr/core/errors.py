"""
Exception hierarchy for the SpyGR library.

Every error carries the fields a caller needs to report it and a default
message, so the CLI can echo the offending configuration verbatim.
"""

from typing import Optional, Sequence


class SpyGRError(Exception):
    """Base class for all library errors."""


class ShapeError(SpyGRError):
    """Raised when operand extents are inconsistent."""

    def __init__(self, op: str, *shapes: Sequence[int], message: Optional[str] = None):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(list(s)) for s in self.shapes)
        self.message = message or f"{op}: incompatible shapes {shown}"
        super().__init__(self.message)


class NonFiniteError(SpyGRError):
    """Raised as soon as an operation produces NaN or Inf."""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        self.message = message or f"{op}: produced non-finite values"
        super().__init__(self.message)


class OracleSizeError(SpyGRError):
    """Raised when the dense O(n^2) oracle is asked for a graph over its cap."""

    def __init__(self, n: int, cap: int):
        self.n = n
        self.cap = cap
        self.message = (
            f"dense similarity oracle refused: n={n} spatial locations exceeds "
            f"oracle cap {cap} (raise --oracle-cap to override)"
        )
        super().__init__(self.message)


class ConfigError(SpyGRError):
    """Raised for invalid configuration values or files."""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        self.message = f"invalid configuration '{field}': {reason}"
        super().__init__(self.message)


class TrainingDivergedError(SpyGRError):
    """Raised when the training loss stops being finite."""

    def __init__(self, iteration: int, last_finite_loss: Optional[float]):
        self.iteration = iteration
        self.last_finite_loss = last_finite_loss
        self.message = (
            f"training diverged at iteration {iteration} "
            f"(last finite loss: {last_finite_loss})"
        )
        super().__init__(self.message)


class SerializationError(SpyGRError):
    """Raised when a tensor or parameter file cannot be decoded."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        self.message = f"cannot decode {path}: {reason}"
        super().__init__(self.message)


class LabelRangeError(SpyGRError):
    """Raised when a class label falls outside [0, num_classes)."""

    def __init__(self, label: int, num_classes: int):
        self.label = label
        self.num_classes = num_classes
        self.message = f"label {label} outside valid range [0, {num_classes})"
        super().__init__(self.message)
