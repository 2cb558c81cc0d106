"""
Spatial pyramid of graph reasoning.

    X^(s)   = down(X^(s+1))                  (finest level is the input)
    Y^(0)   = GR(X^(0))
    Y^(s+1) = GR(X^(s+1)) + up(Y^(s))

down is 2x2 max pooling with stride 2 (ceil mode), up is bilinear
interpolation with half-pixel centers.
"""

from dataclasses import dataclass, field
import logging
import math
import os
from typing import List, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layer import (
    DEFAULT_EPSILON,
    DEFAULT_ORACLE_CAP,
    AttentionMode,
    LaplacianPath,
    SpyGRParams,
    graph_reason,
    load_params,
    save_params,
)
from .tensor import DType, Tensor
from ..utils.json_utils import load_json_file, save_json_file

logger = logging.getLogger(__name__)


def max_levels(height: int, width: int) -> int:
    """Deepest pyramid the extents allow: floor(log2(min(H, W))) + 1."""
    return int(math.floor(math.log2(min(height, width)))) + 1


def pyramid_extents(height: int, width: int, levels: int) -> List[tuple]:
    """Extents from finest to coarsest under ceil halving."""
    extents = [(height, width)]
    for _ in range(levels - 1):
        h, w = extents[-1]
        extents.append(((h + 1) // 2, (w + 1) // 2))
    return extents


@dataclass
class PyramidConfig:
    """
    Per-level graph-reasoning parameters.

    Attributes:
        levels: number of scales (>= 1)
        per_level_params: params for level 0 (finest) .. levels-1 (coarsest)
        share_weights: every level reuses per_level_params[0]
    """
    levels: int
    per_level_params: List[SpyGRParams] = field(default_factory=list)
    share_weights: bool = False

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels", f"must be >= 1, got {self.levels}")
        expected = 1 if self.share_weights else self.levels
        if len(self.per_level_params) != expected:
            raise ConfigError("per_level_params", f"expected {expected} entries, got {len(self.per_level_params)}")
        channels = {p.channels for p in self.per_level_params}
        outs = {p.out_channels for p in self.per_level_params}
        if len(channels) != 1 or len(outs) != 1:
            raise ConfigError("per_level_params", "all levels must share input and output channel counts")

    def params_for(self, level: int) -> SpyGRParams:
        """Params of `level`, 0 being the finest scale."""
        return self.per_level_params[0 if self.share_weights else level]

    @classmethod
    def build(
        cls,
        channels: int,
        embed_dim: int,
        levels: int,
        out_channels: Optional[int] = None,
        attention_mode: AttentionMode = AttentionMode.DYNAMIC,
        include_identity: bool = True,
        share_weights: bool = False,
        epsilon: float = DEFAULT_EPSILON,
        seed: int = 0,
        dtype: DType = DType.F64,
    ) -> "PyramidConfig":
        rng = np.random.default_rng(seed)
        count_ = 1 if share_weights else levels
        params = [
            SpyGRParams.init(channels, embed_dim, out_channels, attention_mode,
                             include_identity, epsilon, rng, dtype)
            for _ in range(count_)
        ]
        return cls(levels, params, share_weights)


def downsample(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,ceil(H/2),ceil(W/2)] by 2x2 max pooling."""
    return ops.max_pool2x2(x)


def upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize to (target_h, target_w) >= source extents."""
    return ops.upsample_bilinear(x, target_h, target_w)


def spygr_pyramid(
    x: Tensor,
    config: PyramidConfig,
    path: LaplacianPath = LaplacianPath.FACTORED,
    oracle_cap: int = DEFAULT_ORACLE_CAP,
) -> Tensor:
    """
    Multi-scale graph reasoning aggregated coarse to fine.

    Args:
        x: [N,C,H,W] input, the finest scale
        config: per-level params
        path: Laplacian evaluation path for every level

    Returns:
        [N,C_out,H,W]
    """
    if x.ndim != 4:
        raise ShapeError("spygr_pyramid", x.shape)
    h, w = x.shape[2], x.shape[3]
    if config.levels > max_levels(h, w):
        raise ConfigError("levels", f"{config.levels} levels exceed the {max_levels(h, w)} allowed for {h}x{w}")

    scales = [x]
    for _ in range(config.levels - 1):
        scales.append(downsample(scales[-1]))

    coarsest = config.levels - 1
    y = graph_reason(scales[coarsest], config.params_for(coarsest), path, oracle_cap)
    for level in range(coarsest - 1, -1, -1):
        xs = scales[level]
        y = ops.add(graph_reason(xs, config.params_for(level), path, oracle_cap),
                    upsample(y, xs.shape[2], xs.shape[3]))
    return y


def save_pyramid(config: PyramidConfig, directory: str) -> str:
    """Per-level manifests under `level_<i>/` plus a top-level pyramid manifest."""
    os.makedirs(directory, exist_ok=True)
    level_dirs = []
    for i, params in enumerate(config.per_level_params):
        sub = f"level_{i}"
        save_params(params, os.path.join(directory, sub))
        level_dirs.append(sub)
    path = os.path.join(directory, "pyramid.json")
    error = save_json_file(path, {
        "kind": "spygr_pyramid",
        "levels": config.levels,
        "share_weights": config.share_weights,
        "level_dirs": level_dirs,
    })
    if error:
        raise ConfigError("pyramid", error)
    return path


def load_pyramid(directory: str) -> PyramidConfig:
    manifest, error = load_json_file(os.path.join(directory, "pyramid.json"))
    if error:
        raise ConfigError("pyramid", error)
    params = [load_params(os.path.join(directory, sub)) for sub in manifest["level_dirs"]]
    return PyramidConfig(int(manifest["levels"]), params, bool(manifest["share_weights"]))
