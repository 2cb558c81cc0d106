"""
Tensor container and reverse-mode tape.

Tensors are immutable wrappers around a NumPy array tagged with a dtype
(f32 or f64). Feature maps use the row-major [N, C, H, W] layout with W
fastest-varying; the [HW x C] matrix views used by the graph layer are
Tensors of rank 2.

Differentiation is tape based: operations executed while a `Tape` is the
active context record their inputs, output and adjoint rule, and
`Tape.backward` replays them in reverse record order.
"""

from contextvars import ContextVar
from dataclasses import dataclass
from enum import Enum
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError, SpyGRError

logger = logging.getLogger(__name__)


class DType(str, Enum):
    """Element types supported by the tensor core."""
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(np.float32) if self is DType.F32 else np.dtype(np.float64)

    @property
    def code(self) -> int:
        """Binary format dtype code."""
        return 1 if self is DType.F32 else 2

    @classmethod
    def from_code(cls, code: int) -> "DType":
        for dtype in cls:
            if dtype.code == code:
                return dtype
        raise ValueError(f"unknown dtype code {code}")

    @classmethod
    def promote(cls, *dtypes: "DType") -> "DType":
        return cls.F64 if any(d is cls.F64 for d in dtypes) else cls.F32


class Tensor:
    """
    Dense immutable array with a dtype tag.

    Args:
        data: array-like values (copied)
        dtype: element type; values are stored at this precision
        requires_grad: mark as a differentiable leaf
        name: optional label used in gradient reports and manifests
    """

    __slots__ = ("_data", "dtype", "requires_grad", "name")

    def __init__(
        self,
        data,
        dtype: DType = DType.F64,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        arr = np.array(data, dtype=dtype.numpy, copy=True)
        if arr.ndim > 4:
            raise ShapeError("Tensor", arr.shape, message=f"Tensor: rank {arr.ndim} exceeds 4")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(name or "Tensor")
        arr.setflags(write=False)
        self._data = arr
        self.dtype = DType(dtype)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, dtype: DType, requires_grad: bool = False) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=dtype.numpy)
        arr.setflags(write=False)
        out._data = arr
        out.dtype = dtype
        out.requires_grad = requires_grad
        out.name = None
        return out

    # =========================================================================
    # Constructors
    # =========================================================================

    @staticmethod
    def _shape(shape: Union[int, Sequence[int]]) -> Tuple[int, ...]:
        return (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(int(n) for n in shape)

    @classmethod
    def zeros(cls, shape: Union[int, Sequence[int]], dtype: DType = DType.F64, **kwargs) -> "Tensor":
        return cls(np.zeros(cls._shape(shape)), dtype=dtype, **kwargs)

    @classmethod
    def ones(cls, shape: Union[int, Sequence[int]], dtype: DType = DType.F64, **kwargs) -> "Tensor":
        return cls(np.ones(cls._shape(shape)), dtype=dtype, **kwargs)

    @classmethod
    def full(cls, shape: Union[int, Sequence[int]], value: float, dtype: DType = DType.F64, **kwargs) -> "Tensor":
        return cls(np.full(cls._shape(shape), value), dtype=dtype, **kwargs)

    @classmethod
    def uniform(
        cls,
        shape: Union[int, Sequence[int]],
        bound: float,
        rng: np.random.Generator,
        dtype: DType = DType.F64,
        **kwargs,
    ) -> "Tensor":
        """Values drawn from uniform(-bound, bound)."""
        return cls(rng.uniform(-bound, bound, size=cls._shape(shape)), dtype=dtype, **kwargs)

    # =========================================================================
    # Properties
    # =========================================================================

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def nbytes(self) -> int:
        return int(self._data.nbytes)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", self.shape, message=f"item: tensor of shape {list(self.shape)} is not a scalar")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, self.dtype)

    def as_leaf(self, name: Optional[str] = None) -> "Tensor":
        """Same values as a fresh differentiable leaf."""
        leaf = Tensor._wrap(self._data, self.dtype, requires_grad=True)
        leaf.name = name or self.name
        return leaf

    def astype(self, dtype: DType) -> "Tensor":
        return Tensor._wrap(self._data, DType(dtype), self.requires_grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.value}{label})"

    # Operator sugar; the kernels live in spygr.core.ops
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.matmul(self, other)


Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    """One recorded primitive: inputs, output and the adjoint rule."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("spygr_active_tape", default=None)


class Tape:
    """
    Ordered record of primitive operations.

    Usage:
        with Tape() as tape:
            w = tape.watch(w)
            loss = ops.sum(f(x, w))
        grads = tape.backward(loss)
        grads[w]

    Leaves are tensors created with requires_grad=True that enter a recorded
    operation, plus anything passed to `watch`. The tape is single-writer.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._leaves: Dict[int, Tensor] = {}
        self._produced: Dict[int, int] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPE.get() is not None:
            raise SpyGRError("nested tapes are not supported")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor):
        """Mark tensors as leaves; returns them for convenient rebinding."""
        for t in tensors:
            t.requires_grad = True
            if id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        return tensors[0] if len(tensors) == 1 else tensors

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, adjoint: Adjoint) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced[id(output)] = len(self.entries)
        self.entries.append(TapeEntry(op, inputs, output, adjoint))

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """
        Reverse-mode sweep from a scalar loss.

        Args:
            loss: scalar tensor produced on this tape

        Returns:
            Mapping leaf tensor -> float64 gradient array of the leaf's shape.
            Leaves the loss does not depend on get zeros.
        """
        if loss.size != 1:
            raise ShapeError("backward", loss.shape, message=f"backward: loss must be scalar, got shape {list(loss.shape)}")
        if id(loss) not in self._produced and id(loss) not in self._leaves:
            raise SpyGRError("backward: loss was not produced on this tape")

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        for entry in reversed(self.entries):
            grad_out = adjoints.pop(id(entry.output), None)
            if grad_out is None:
                continue
            grads_in = entry.adjoint(grad_out)
            for t, g in zip(entry.inputs, grads_in):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise ShapeError(f"{entry.op} adjoint", g.shape, t.shape)
                key = id(t)
                adjoints[key] = g if key not in adjoints else adjoints[key] + g

        grads: Dict[Tensor, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            grads[leaf] = adjoints.get(key, np.zeros(leaf.shape, dtype=np.float64))
        logger.debug(f"backward: {len(self.entries)} entries, {len(grads)} leaves")
        return grads


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradients of `loss` for every leaf recorded on `tape`."""
    return tape.backward(loss)
