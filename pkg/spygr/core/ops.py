"""
Differentiable primitives.

Each op computes in float64, casts the result to the promoted dtype of its
inputs, rejects non-finite output, reports its multiply-accumulates to the
active `MacCounter` and, when a tape is recording and an input requires a
gradient, records its adjoint rule.

MAC accounting: matmul p*q*r; conv kernels one MAC per weight use;
tensor-tensor add/sub/mul one per output element; max pooling one per
input element; bilinear upsampling 8 per output element. Nonlinearities,
reductions, reshapes and scalar shifts/scalings are free.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .counter import count
from .errors import LabelRangeError, NonFiniteError, ShapeError
from .tensor import DType, Tensor, active_tape


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _result(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, adjoint, dtype: Optional[DType] = None) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    dtype = dtype or DType.promote(*(t.dtype for t in inputs))
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, dtype, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, result, adjoint)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# =============================================================================
# Elementwise arithmetic
# =============================================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shape("add", a, b)
    out = _f64(a) + _f64(b)
    count("add", int(np.prod(shape)))
    return _result("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shape("sub", a, b)
    out = _f64(a) - _f64(b)
    count("sub", int(np.prod(shape)))
    return _result("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shape("mul", a, b)
    x, y = _f64(a), _f64(b)
    count("mul", int(np.prod(shape)))
    return _result("mul", (a, b), x * y,
                   lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _result("add_scalar", (a,), _f64(a) + value, lambda g: (g,))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result("scale", (a,), _f64(a) * factor, lambda g: (g * factor,))


def rsqrt(a: Tensor, floor: float = 0.0) -> Tensor:
    """(a + floor)^(-1/2); a zero argument surfaces as NonFiniteError."""
    shifted = _f64(a) + floor
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 / np.sqrt(shifted)
    return _result("rsqrt", (a,), out, lambda g: (g * -0.5 * out ** 3,))


# =============================================================================
# Nonlinearities
# =============================================================================

def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    v = _f64(x)
    mask = v > 0
    return _result("relu", (x,), np.where(mask, v, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = _f64(x)
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-np.abs(v)))
    s = np.where(v >= 0, pos, 1.0 - pos)
    return _result("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


# =============================================================================
# Linear algebra and reshaping
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[p x q] @ [q x r] -> [p x r]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    x, y = _f64(a), _f64(b)
    count("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return _result("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, message=f"transpose: expected a matrix, got shape {list(a.shape)}")
    return _result("transpose", (a,), _f64(a).T, lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    return _result("reshape", (a,), _f64(a).reshape(shape), lambda g: (g.reshape(a.shape),))


def unfold(x: Tensor, batch: int = 0) -> Tensor:
    """Batch element `batch` of [N,C,H,W] as the [HW x C] matrix view."""
    if x.ndim != 4:
        raise ShapeError("unfold", x.shape, message=f"unfold: expected [N,C,H,W], got {list(x.shape)}")
    _, c, h, w = x.shape

    def adjoint(g):
        full = np.zeros(x.shape)
        full[batch] = g.T.reshape(c, h, w)
        return (full,)

    return _result("unfold", (x,), _f64(x)[batch].reshape(c, h * w).T, adjoint)


def fold(m: Tensor, height: int, width: int) -> Tensor:
    """[HW x C] matrix back to a [1,C,H,W] feature map."""
    if m.ndim != 2 or m.shape[0] != height * width:
        raise ShapeError("fold", m.shape, (height * width, -1))
    c = m.shape[1]
    out = _f64(m).T.reshape(1, c, height, width)
    return _result("fold", (m,), out, lambda g: (g[0].reshape(c, height * width).T,))


def select(x: Tensor, batch: int) -> Tensor:
    """Batch element `batch` as a [1,C,H,W] tensor."""

    def adjoint(g):
        full = np.zeros(x.shape)
        full[batch:batch + 1] = g
        return (full,)

    return _result("select", (x,), _f64(x)[batch:batch + 1], adjoint)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate [1,C,H,W] tensors along the batch axis."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("stack", (), message="stack: nothing to stack")
    for p in parts[1:]:
        if p.shape[1:] != parts[0].shape[1:]:
            raise ShapeError("stack", parts[0].shape, p.shape)
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([_f64(p) for p in parts], axis=0)
    return _result("stack", parts, out, lambda g: tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0)))


# =============================================================================
# Reductions
# =============================================================================

def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    v = _f64(a)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", (a,), v.sum(axis=axis, keepdims=keepdims), adjoint)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    v = _f64(a)
    n = v.size if axis is None else v.shape[axis]

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result("mean", (a,), v.mean(axis=axis, keepdims=keepdims), adjoint)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    hw = x.shape[2] * x.shape[3]
    v = _f64(x)
    # offsets from the first pixel, so a constant channel pools to itself exactly
    ref = v[:, :, :1, :1]
    out = ref + (v - ref).mean(axis=(2, 3), keepdims=True)
    return _result("global_avg_pool", (x,), out,
                   lambda g: (np.broadcast_to(g / hw, x.shape).copy(),))


# =============================================================================
# Convolutions
# =============================================================================

def conv1x1(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Per-pixel linear map over channels.

    Args:
        x: [N, C_in, H, W]
        w: [C_in, C_out]
        bias: optional [C_out]

    Returns:
        [N, C_out, H, W]; batch element n equals unfold(x, n) @ w folded back.
    """
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv1x1", x.shape, w.shape)
    n, c, h, wd = x.shape
    c_out = w.shape[1]
    xv, wv = _f64(x), _f64(w)
    cols = [np.ascontiguousarray(xv[i].reshape(c, h * wd).T) for i in range(n)]
    rows = [col @ wv for col in cols]
    if bias is not None:
        rows = [r + _f64(bias) for r in rows]
    out = np.stack([r.T.reshape(c_out, h, wd) for r in rows])
    count("conv1x1", n * h * wd * c * c_out)

    def adjoint(g):
        gm = [g[i].reshape(c_out, h * wd).T for i in range(n)]
        gx = np.stack([(gi @ wv.T).T.reshape(c, h, wd) for gi in gm])
        gw = np.zeros_like(wv)
        for col, gi in zip(cols, gm):
            gw += col.T @ gi
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _result("conv1x1", inputs, out, adjoint)


def conv3x3(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 1) -> Tensor:
    """
    3x3 cross-correlation with zero padding.

    Args:
        x: [N, C_in, H, W]
        w: [C_out, C_in, 3, 3]
        bias: optional [C_out]
        stride: 1 or 2
        padding: 0 or 1

    Returns:
        [N, C_out, H_o, W_o] with H_o = floor((H + 2p - 3) / stride) + 1.
    """
    if stride not in (1, 2) or padding not in (0, 1):
        raise ShapeError("conv3x3", x.shape, message=f"conv3x3: unsupported stride={stride} padding={padding}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError("conv3x3", x.shape, w.shape)
    n, c, h, wd = x.shape
    c_out = w.shape[0]
    h_out = (h + 2 * padding - 3) // stride + 1
    w_out = (wd + 2 * padding - 3) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv3x3", x.shape, message=f"conv3x3: output extent {h_out}x{w_out} < 1 for input {list(x.shape)}")

    xp = np.pad(_f64(x), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h_out * w_out, c * 9)
    wm = _f64(w).reshape(c_out, c * 9)
    out = cols @ wm.T
    if bias is not None:
        out = out + _f64(bias)
    out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    count("conv3x3", n * h_out * w_out * c_out * c * 9)

    def adjoint(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wm).reshape(n, h_out, w_out, c, 3, 3)
        gxp = np.zeros(xp.shape)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                    gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _result("conv3x3", inputs, out, adjoint)


# =============================================================================
# Resampling
# =============================================================================

def max_pool2x2(x: Tensor) -> Tensor:
    """
    2x2 max pooling, stride 2, ceil mode: [N,C,H,W] -> [N,C,ceil(H/2),ceil(W/2)].

    The gradient is routed to the first maximal element in scan order.
    """
    if x.ndim != 4:
        raise ShapeError("max_pool2x2", x.shape)
    n, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.full((n, c, 2 * ho, 2 * wo), -np.inf)
    xp[:, :, :h, :w] = _f64(x)
    win = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    count("max_pool2x2", x.size)

    def adjoint(g):
        gwin = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gwin, idx, g[..., None], axis=-1)
        gxp = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (np.ascontiguousarray(gxp[:, :, :h, :w]),)

    return _result("max_pool2x2", (x,), out, adjoint)


def _lerp_coords(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel sampling: src = (dst + 0.5) * (src/dst) - 0.5, clamped."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def _lerp_matrix(i0: np.ndarray, i1: np.ndarray, frac: np.ndarray, src: int) -> np.ndarray:
    m = np.zeros((len(i0), src))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """
    Bilinear resize of [N,C,H,W] to [N,C,height,width], height >= H, width >= W.

    Interpolates as x0 + f * (x1 - x0) so constant fields stay exactly constant.
    """
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear", x.shape)
    n, c, h, w = x.shape
    if height < h or width < w:
        raise ShapeError("upsample_bilinear", x.shape, (n, c, height, width),
                         message=f"upsample_bilinear: target {height}x{width} smaller than source {h}x{w}")
    y0, y1, fy = _lerp_coords(h, height)
    x0, x1, fx = _lerp_coords(w, width)
    v = _f64(x)
    rows = v[:, :, y0, :] + fy[:, None] * (v[:, :, y1, :] - v[:, :, y0, :])
    out = rows[..., x0] + fx * (rows[..., x1] - rows[..., x0])
    count("upsample_bilinear", 8 * n * c * height * width)

    my = _lerp_matrix(y0, y1, fy, h)
    mx = _lerp_matrix(x0, x1, fx, w)
    return _result("upsample_bilinear", (x,), out, lambda g: (my.T @ (g @ mx),))


# =============================================================================
# Losses
# =============================================================================

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean per-pixel softmax cross entropy.

    Args:
        logits: [N, K, H, W]
        labels: integer array [N, H, W] with values in [0, K)

    Returns:
        Scalar tensor.
    """
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
        raise LabelRangeError(bad, k)

    z = _f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)
    pixels = labels.size
    loss = -picked.sum() / pixels

    def adjoint(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[:, None].astype(np.int64),
                          np.take_along_axis(grad, labels[:, None].astype(np.int64), axis=1) - 1.0, axis=1)
        return (grad * (g / pixels),)

    return _result("cross_entropy", (logits,), np.asarray(loss), adjoint)


def softmax_probabilities(logits: Tensor) -> np.ndarray:
    """Class probabilities along axis 1 (no tape recording)."""
    z = _f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
