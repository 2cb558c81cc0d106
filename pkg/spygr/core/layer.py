"""
Graph reasoning on spatial features.

For one batch element with unfolded features X in R^{n x C} (n = H*W):

    phi     = ReLU(X W_phi)                         [n x M]
    lambda  = sigmoid(mean_rows(X) W_rho)           [M]      (dynamic attention)
    A       = phi diag(lambda) phi^T                [n x n]  (never built on the fast path)
    d       = phi (lambda * (phi^T 1))              [n]
    P       = diag((d + eps)^-1/2) phi
    L X     = X - P (lambda * (P^T X))
    Y       = ReLU(L X Theta)

The dense path materializes A and is kept as a verification oracle, bounded
by an explicit cap on n.
"""

from dataclasses import dataclass, replace
from enum import Enum
import logging
import os
from typing import Dict, Optional

import numpy as np

from . import ops
from .errors import ConfigError, OracleSizeError, ShapeError
from .serialization import load_tensor_set, save_tensor_set
from .tensor import DType, Tensor
from ..utils.json_utils import load_json_file, save_json_file

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6
DEFAULT_ORACLE_CAP = 4096
STATIC_LAMBDA_FLOOR = 1e-4


class AttentionMode(str, Enum):
    """How the diagonal metric on the embedding inner product is produced."""
    NONE = "none"
    STATIC = "static"
    DYNAMIC = "dynamic"


class LaplacianPath(str, Enum):
    FACTORED = "factored"
    NAIVE = "naive"


@dataclass
class SpyGRParams:
    """
    Learnable weights of one graph-reasoning block.

    Attributes:
        w_phi: [C x M] embedding weights
        theta: [C x C_out] output transform
        w_rho: [C x M] attention weights (dynamic mode only)
        static_lambda: [M] data-independent attention (static mode only)
        attention_mode: none, static or dynamic
        include_identity: keep the leading X term of the Laplacian
        epsilon: degree floor added before the inverse square root
    """
    w_phi: Tensor
    theta: Tensor
    w_rho: Optional[Tensor] = None
    static_lambda: Optional[Tensor] = None
    attention_mode: AttentionMode = AttentionMode.DYNAMIC
    include_identity: bool = True
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.attention_mode = AttentionMode(self.attention_mode)
        if self.w_phi.ndim != 2 or min(self.w_phi.shape) < 1:
            raise ConfigError("w_phi", f"expected [C x M] with C, M >= 1, got {list(self.w_phi.shape)}")
        c, m = self.w_phi.shape
        if self.theta.ndim != 2 or self.theta.shape[0] != c:
            raise ConfigError("theta", f"expected [{c} x C_out], got {list(self.theta.shape)}")
        if self.attention_mode is AttentionMode.DYNAMIC:
            if self.w_rho is None or self.w_rho.shape != (c, m):
                raise ConfigError("w_rho", f"dynamic attention needs w_rho of shape [{c} x {m}]")
        if (self.static_lambda is not None) != (self.attention_mode is AttentionMode.STATIC):
            raise ConfigError("static_lambda", "present if and only if attention_mode is static")
        if self.static_lambda is not None and self.static_lambda.shape != (m,):
            raise ConfigError("static_lambda", f"expected [{m}], got {list(self.static_lambda.shape)}")
        if self.epsilon < 0:
            raise ConfigError("epsilon", "degree floor must be non-negative")

    @property
    def channels(self) -> int:
        return self.w_phi.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w_phi.shape[1]

    @property
    def out_channels(self) -> int:
        return self.theta.shape[1]

    def tensors(self) -> Dict[str, Tensor]:
        """Learnable tensors by name."""
        named = {"w_phi": self.w_phi, "theta": self.theta}
        if self.w_rho is not None and self.attention_mode is AttentionMode.DYNAMIC:
            named["w_rho"] = self.w_rho
        if self.static_lambda is not None:
            named["static_lambda"] = self.static_lambda
        return named

    def with_tensors(self, tensors: Dict[str, Tensor]) -> "SpyGRParams":
        """Copy with some tensors swapped (used to bind tape leaves)."""
        return replace(self, **{k: v for k, v in tensors.items() if k in self.tensors()})

    @classmethod
    def init(
        cls,
        channels: int,
        embed_dim: int,
        out_channels: Optional[int] = None,
        attention_mode: AttentionMode = AttentionMode.DYNAMIC,
        include_identity: bool = True,
        epsilon: float = DEFAULT_EPSILON,
        rng: Optional[np.random.Generator] = None,
        dtype: DType = DType.F64,
    ) -> "SpyGRParams":
        """
        Seeded uniform(-k, k) initialization with k = fan_in^-1/2.

        Static attention starts at ones.
        """
        if channels < 1 or embed_dim < 1:
            raise ConfigError("shape", f"channels={channels} and embed_dim={embed_dim} must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        out_channels = out_channels or channels
        attention_mode = AttentionMode(attention_mode)
        k = channels ** -0.5
        w_phi = Tensor.uniform((channels, embed_dim), k, rng, dtype=dtype, name="w_phi")
        w_rho = Tensor.uniform((channels, embed_dim), k, rng, dtype=dtype, name="w_rho")
        theta = Tensor.uniform((channels, out_channels), k, rng, dtype=dtype, name="theta")
        static_lambda = None
        if attention_mode is AttentionMode.STATIC:
            static_lambda = Tensor.ones((embed_dim,), dtype=dtype, name="static_lambda")
        return cls(
            w_phi=w_phi,
            theta=theta,
            w_rho=w_rho if attention_mode is AttentionMode.DYNAMIC else None,
            static_lambda=static_lambda,
            attention_mode=attention_mode,
            include_identity=include_identity,
            epsilon=epsilon,
        )


@dataclass
class SimilarityFactors:
    """
    Implicit similarity A = phi diag(lam) phi^T for one batch element.

    Attributes:
        phi: [n x M] non-negative embedded features
        lam: [M] attention diagonal (ones when attention is off)
        degrees: [n] row sums of A
        epsilon: degree floor
        height, width: spatial grid the rows of phi index
        weighted: False when lam is the implicit all-ones diagonal
    """
    phi: Tensor
    lam: Tensor
    degrees: Tensor
    epsilon: float
    height: int
    width: int
    weighted: bool = True

    @property
    def n(self) -> int:
        return self.phi.shape[0]


# =============================================================================
# Factor construction
# =============================================================================

def _check_single(x: Tensor, op: str) -> None:
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(op, x.shape, message=f"{op}: expected a single [1,C,H,W] element, got {list(x.shape)}")


def embed_phi(x: Tensor, w_phi: Tensor) -> Tensor:
    """ReLU(unfold(x) W_phi): [1,C,H,W] -> [n x M], entries >= 0."""
    _check_single(x, "embed_phi")
    if x.shape[1] != w_phi.shape[0]:
        raise ShapeError("embed_phi", x.shape, w_phi.shape)
    return ops.relu(ops.matmul(ops.unfold(x), w_phi))


def channel_attention(x: Tensor, w_rho: Tensor) -> Tensor:
    """sigmoid(W_rho^T mean_{H,W}(x)): every entry in (0, 1)."""
    _check_single(x, "channel_attention")
    if x.shape[1] != w_rho.shape[0]:
        raise ShapeError("channel_attention", x.shape, w_rho.shape)
    pooled = ops.reshape(ops.global_avg_pool(x), (1, x.shape[1]))
    return ops.reshape(ops.sigmoid(ops.matmul(pooled, w_rho)), (w_rho.shape[1],))


def _attention_diagonal(x: Tensor, params: SpyGRParams) -> Optional[Tensor]:
    if params.attention_mode is AttentionMode.DYNAMIC:
        return channel_attention(x, params.w_rho)
    if params.attention_mode is AttentionMode.STATIC:
        return params.static_lambda
    return None


def _degree_chain(phi: Tensor, lam: Optional[Tensor]) -> Tensor:
    """d = phi (lam * (phi^T 1)), each step a matrix-vector product."""
    ones = Tensor._wrap(np.ones((phi.shape[0], 1)), phi.dtype)
    col = ops.matmul(ops.transpose(phi), ones)
    if lam is not None:
        col = ops.mul(ops.reshape(lam, (lam.shape[0], 1)), col)
    return ops.reshape(ops.matmul(phi, col), (phi.shape[0],))


def build_factors(x: Tensor, params: SpyGRParams) -> SimilarityFactors:
    """Embedding, attention diagonal and degrees for one [1,C,H,W] element."""
    _check_single(x, "build_factors")
    phi = embed_phi(x, params.w_phi)
    lam = _attention_diagonal(x, params)
    degrees = _degree_chain(phi, lam)
    weighted = lam is not None
    if lam is None:
        lam = Tensor._wrap(np.ones(params.embed_dim), phi.dtype)
    return SimilarityFactors(phi, lam, degrees, params.epsilon, x.shape[2], x.shape[3], weighted)


def degrees_factored(factors: SimilarityFactors) -> Tensor:
    """Row sums of the implicit similarity without forming it."""
    return _degree_chain(factors.phi, factors.lam if factors.weighted else None)


def similarity_row(factors: SimilarityFactors, index: int) -> np.ndarray:
    """Row A_i = phi_i diag(lam) phi^T in O(n M)."""
    if not 0 <= index < factors.n:
        raise ShapeError("similarity_row", (index,), (factors.n,),
                         message=f"similarity_row: pixel index {index} outside [0, {factors.n})")
    phi = factors.phi.data.astype(np.float64)
    lam = factors.lam.data.astype(np.float64)
    return phi @ (lam * phi[index])


def materialize_similarity(factors: SimilarityFactors, oracle_cap: int = DEFAULT_ORACLE_CAP) -> Tensor:
    """Dense A = phi diag(lam) phi^T (oracle only, n <= oracle_cap)."""
    if factors.n > oracle_cap:
        raise OracleSizeError(factors.n, oracle_cap)
    phi = factors.phi
    weighted = ops.mul(phi, ops.reshape(factors.lam, (1, factors.lam.shape[0])))
    half = ops.matmul(weighted, ops.transpose(phi))
    # exact symmetry regardless of BLAS summation order
    return ops.scale(ops.add(half, ops.transpose(half)), 0.5)


# =============================================================================
# Laplacian application
# =============================================================================

def apply_laplacian_factored(x: Tensor, factors: SimilarityFactors, include_identity: bool = True) -> Tensor:
    """
    L X = X - P (lam * (P^T X)), P = diag((d + eps)^-1/2) phi.

    Cost is linear in n per channel. With include_identity off only the
    normalized similarity term is returned.
    """
    _check_single(x, "apply_laplacian")
    if x.shape[2:] != (factors.height, factors.width):
        raise ShapeError("apply_laplacian", x.shape, (1, -1, factors.height, factors.width))
    n = factors.n
    xm = ops.unfold(x)
    d_inv = ops.reshape(ops.rsqrt(factors.degrees, factors.epsilon), (n, 1))
    p = ops.mul(d_inv, factors.phi)
    ptx = ops.matmul(ops.transpose(p), xm)
    if factors.weighted:
        ptx = ops.mul(ops.reshape(factors.lam, (factors.lam.shape[0], 1)), ptx)
    smoothed = ops.matmul(p, ptx)
    out = ops.sub(xm, smoothed) if include_identity else smoothed
    return ops.fold(out, factors.height, factors.width)


def apply_laplacian_naive(
    x: Tensor,
    factors: SimilarityFactors,
    include_identity: bool = True,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
) -> Tensor:
    """(I - D^-1/2 A D^-1/2) X through the materialized similarity (oracle only)."""
    _check_single(x, "apply_laplacian_naive")
    if x.shape[2:] != (factors.height, factors.width):
        raise ShapeError("apply_laplacian_naive", x.shape, (1, -1, factors.height, factors.width))
    n = factors.n
    a = materialize_similarity(factors, oracle_cap)
    # row sums of the dense matrix, independent of factors.degrees
    d_inv = ops.rsqrt(ops.sum(a, axis=1), factors.epsilon)
    normalized = ops.mul(ops.mul(ops.reshape(d_inv, (n, 1)), a), ops.reshape(d_inv, (1, n)))
    xm = ops.unfold(x)
    smoothed = ops.matmul(normalized, xm)
    out = ops.sub(xm, smoothed) if include_identity else smoothed
    return ops.fold(out, factors.height, factors.width)


def apply_laplacian(
    x: Tensor,
    factors: SimilarityFactors,
    include_identity: bool = True,
    path: LaplacianPath = LaplacianPath.FACTORED,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
) -> Tensor:
    if LaplacianPath(path) is LaplacianPath.NAIVE:
        return apply_laplacian_naive(x, factors, include_identity, oracle_cap)
    return apply_laplacian_factored(x, factors, include_identity)


# =============================================================================
# Graph reasoning
# =============================================================================

def _graph_reason_single(x: Tensor, params: SpyGRParams, path: LaplacianPath, oracle_cap: int) -> Tensor:
    factors = build_factors(x, params)
    lx = apply_laplacian(x, factors, params.include_identity, path, oracle_cap)
    y = ops.relu(ops.matmul(ops.unfold(lx), params.theta))
    return ops.fold(y, x.shape[2], x.shape[3])


def graph_reason(
    x: Tensor,
    params: SpyGRParams,
    path: LaplacianPath = LaplacianPath.FACTORED,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
) -> Tensor:
    """
    Y = ReLU(L X Theta) for [N,C,H,W] input.

    Batch elements are processed independently and stacked, so the
    similarity never mixes batch elements.
    """
    if x.ndim != 4:
        raise ShapeError("graph_reason", x.shape)
    if x.shape[1] != params.channels:
        raise ShapeError("graph_reason", x.shape, params.w_phi.shape)
    path = LaplacianPath(path)
    if x.shape[0] == 1:
        return _graph_reason_single(x, params, path, oracle_cap)
    parts = [_graph_reason_single(ops.select(x, b), params, path, oracle_cap) for b in range(x.shape[0])]
    return ops.stack(parts)


def simplest_gcn(
    x: Tensor,
    params: SpyGRParams,
    path: LaplacianPath = LaplacianPath.FACTORED,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
) -> Tensor:
    """Y = ReLU(D^-1/2 A D^-1/2 X Theta) with A = phi phi^T (no attention, no identity)."""
    if params.attention_mode is not AttentionMode.NONE:
        raise ConfigError("attention_mode", "simplest_gcn requires attention_mode 'none'")
    return graph_reason(x, replace(params, include_identity=False), path, oracle_cap)


def project_static_lambda(params: SpyGRParams) -> SpyGRParams:
    """Clamp static attention to stay positive after an optimizer step."""
    if params.static_lambda is None:
        return params
    clamped = np.maximum(params.static_lambda.data, STATIC_LAMBDA_FLOOR)
    return replace(params, static_lambda=Tensor(clamped, dtype=params.static_lambda.dtype, name="static_lambda"))


# =============================================================================
# Persistence
# =============================================================================

PARAM_ROLES = {
    "w_phi": "embedding",
    "w_rho": "attention",
    "static_lambda": "attention",
    "theta": "output_transform",
}


def params_manifest(params: SpyGRParams, entries) -> Dict:
    return {
        "kind": "spygr_params",
        "attention_mode": params.attention_mode.value,
        "include_identity": params.include_identity,
        "epsilon": params.epsilon,
        "channels": params.channels,
        "embed_dim": params.embed_dim,
        "out_channels": params.out_channels,
        "tensors": entries,
    }


def save_params(params: SpyGRParams, directory: str) -> str:
    """Write tensors plus `manifest.json` into `directory`; returns the manifest path."""
    entries = save_tensor_set(directory, params.tensors(), PARAM_ROLES)
    path = os.path.join(directory, "manifest.json")
    error = save_json_file(path, params_manifest(params, entries))
    if error:
        raise ConfigError("params", error)
    logger.info(f"Saved SpyGR params ({len(entries)} tensors) to {directory}")
    return path


def load_params(directory: str) -> SpyGRParams:
    manifest, error = load_json_file(os.path.join(directory, "manifest.json"))
    if error:
        raise ConfigError("params", error)
    tensors = load_tensor_set(directory, manifest.get("tensors", []))
    return SpyGRParams(
        w_phi=tensors["w_phi"],
        theta=tensors["theta"],
        w_rho=tensors.get("w_rho"),
        static_lambda=tensors.get("static_lambda"),
        attention_mode=AttentionMode(manifest["attention_mode"]),
        include_identity=bool(manifest["include_identity"]),
        epsilon=float(manifest["epsilon"]),
    )
