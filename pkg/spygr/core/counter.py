"""
Instrumented multiply-accumulate counter.

Forward kernels in `spygr.core.ops` report the MACs they execute to the
counter active in the current context. Counters nest; every enclosing
counter sees the tally. Backward passes never count.
"""

from contextvars import ContextVar
from typing import Dict, Optional, Tuple

_ACTIVE: ContextVar[Tuple["MacCounter", ...]] = ContextVar("spygr_mac_counters", default=())


class MacCounter:
    """
    Per-run accumulator of executed multiply-accumulates.

    Usage:
        with MacCounter() as counter:
            graph_reason(x, params)
        counter.total

    Attributes:
        total: MACs counted while the context was active
        by_op: the same tally broken down by kernel name
    """

    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = {}
        self._token = None

    def __enter__(self) -> "MacCounter":
        self._token = _ACTIVE.set(_ACTIVE.get() + (self,))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


def count(op: str, macs: int) -> None:
    """Report `macs` executed by kernel `op` to every active counter."""
    if macs <= 0:
        return
    for counter in _ACTIVE.get():
        counter.add(op, int(macs))


def active_counter() -> Optional[MacCounter]:
    """Innermost active counter, if any."""
    counters = _ACTIVE.get()
    return counters[-1] if counters else None
