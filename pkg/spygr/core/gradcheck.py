"""
Central finite-difference checks for tape gradients.
"""

from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .tensor import DType, Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    """Worst-case agreement between analytic and numeric gradients."""
    passed: bool
    max_abs_error: float
    max_rel_error: float
    checked_entries: int
    failures: List[str] = field(default_factory=list)
    per_input: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "checked_entries": self.checked_entries,
            "per_input": dict(self.per_input),
            "failures": list(self.failures[:10]),
        }


def _contract(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor._wrap(weights, DType.F64)))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    seed: int = 0,
    names: Sequence[str] = (),
) -> GradCheckResult:
    """
    Compare tape gradients of `fn` against central differences.

    The output of `fn(*inputs)` is contracted with fixed-seed random weights
    to form a scalar loss. An entry passes when
    |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).

    Args:
        fn: function of the input tensors returning a tensor
        inputs: f64 tensors to differentiate with respect to
        step: finite-difference step
        rtol: relative tolerance
        atol: absolute tolerance, governs entries with |grad| near zero
        seed: seed for the contraction weights
        names: labels for the inputs in the result

    Returns:
        GradCheckResult with worst errors over every checked entry.
    """
    names = list(names) or [t.name or f"input{i}" for i, t in enumerate(inputs)]
    base = [t.numpy().astype(np.float64) for t in inputs]

    with Tape() as tape:
        leaves = [Tensor(b, dtype=DType.F64, requires_grad=True, name=n) for b, n in zip(base, names)]
        out = fn(*leaves)
        weights = np.random.default_rng(seed).standard_normal(out.shape)
        loss = _contract(out, weights)
    grads = tape.backward(loss)

    def evaluate(values: List[np.ndarray]) -> float:
        result = fn(*[Tensor(v, dtype=DType.F64) for v in values])
        return float(np.sum(result.data.astype(np.float64) * weights))

    max_abs = 0.0
    max_rel = 0.0
    checked = 0
    failures: List[str] = []
    per_input: Dict[str, float] = {}
    for k, (leaf, name) in enumerate(zip(leaves, names)):
        analytic = grads[leaf]
        worst = 0.0
        for idx in np.ndindex(*base[k].shape):
            values = [b.copy() for b in base]
            values[k][idx] += step
            f_plus = evaluate(values)
            values[k][idx] -= 2 * step
            f_minus = evaluate(values)
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic[idx])
            err = abs(a - numeric)
            scale_ = max(abs(a), abs(numeric))
            rel = err / scale_ if scale_ > atol else 0.0
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, rel)
            worst = max(worst, rel)
            checked += 1
            if err > atol + rtol * scale_:
                failures.append(f"{name}{list(idx)}: analytic={a!r} numeric={numeric!r}")
        per_input[name] = worst

    passed = not failures
    logger.debug(f"gradcheck: {checked} entries, max rel {max_rel:.3e}, passed={passed}")
    return GradCheckResult(passed, max_abs, max_rel, checked, failures, per_input)


def relu_margin(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    """
    Smallest |pre-activation| over every ReLU `fn` evaluates at `inputs`.

    Central differences are only meaningful when no ReLU input lies within a
    step of its kink; callers redraw inputs whose margin is too small.
    """
    with Tape() as tape:
        leaves = [Tensor(t.data, dtype=DType.F64, requires_grad=True) for t in inputs]
        fn(*leaves)
    margins = [float(np.min(np.abs(e.inputs[0].data))) for e in tape.entries
               if e.op == "relu" and e.inputs[0].size]
    return min(margins) if margins else float("inf")
