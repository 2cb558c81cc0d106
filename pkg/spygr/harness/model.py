"""
Small convolutional segmentation network hosting a graph-reasoning head.

    image -> conv blocks 1..4 (3x3 + ReLU, blocks 2 and 3 stride 2)
          -> 3x3 reduction -> [graph reasoning | pyramid | nothing]
          -> 1x1 classifier -> bilinear upsample to the image grid

An auxiliary 1x1 classifier reads block 3.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
import logging
import os
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..core import ops
from ..core.errors import ConfigError
from ..core.layer import AttentionMode, SpyGRParams, graph_reason, load_params, save_params
from ..core.pyramid import PyramidConfig, load_pyramid, save_pyramid, spygr_pyramid
from ..core.serialization import load_tensor_set, save_tensor_set
from ..core.tensor import DType, Tensor
from ..utils.json_utils import load_json_file, save_json_file

logger = logging.getLogger(__name__)


class AblationRow(str, Enum):
    """Cumulative ablation ladder, each row adding one component to the previous."""
    FCN = "fcn"
    GCN = "gcn"
    STATIC = "static"
    DYNAMIC = "dynamic"
    IDENTITY = "identity"
    PYRAMID = "pyramid"


ABLATION_LADDER: Tuple[AblationRow, ...] = tuple(AblationRow)


@dataclass(frozen=True)
class AblationSpec:
    """Graph head configuration implied by one ablation row."""
    row: AblationRow = AblationRow.PYRAMID
    pyramid_levels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "row", AblationRow(self.row))
        if self.pyramid_levels < 2:
            raise ConfigError("pyramid_levels", f"must be >= 2, got {self.pyramid_levels}")

    @property
    def rank(self) -> int:
        return ABLATION_LADDER.index(self.row)

    @property
    def uses_graph(self) -> bool:
        return self.row is not AblationRow.FCN

    @property
    def attention_mode(self) -> AttentionMode:
        if self.rank >= ABLATION_LADDER.index(AblationRow.DYNAMIC):
            return AttentionMode.DYNAMIC
        if self.row is AblationRow.STATIC:
            return AttentionMode.STATIC
        return AttentionMode.NONE

    @property
    def include_identity(self) -> bool:
        return self.rank >= ABLATION_LADDER.index(AblationRow.IDENTITY)

    @property
    def levels(self) -> int:
        return self.pyramid_levels if self.row is AblationRow.PYRAMID else 1

    @classmethod
    def parse(cls, name: str, pyramid_levels: int = 4) -> "AblationSpec":
        try:
            return cls(AblationRow(name.lower()), pyramid_levels)
        except ValueError:
            choices = ", ".join(r.value for r in AblationRow)
            raise ConfigError("ablation", f"unknown row '{name}' (choose from {choices})") from None

    @classmethod
    def ladder(cls, pyramid_levels: int = 4) -> List["AblationSpec"]:
        return [cls(row, pyramid_levels) for row in ABLATION_LADDER]


@dataclass(frozen=True)
class SegModelConfig:
    in_channels: int = 3
    widths: Tuple[int, ...] = (8, 16, 16, 16)
    reduce_channels: int = 16
    embed_dim: int = 8
    num_classes: int = 5
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def __post_init__(self):
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError("widths", f"expected four positive block widths, got {list(self.widths)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"must be >= 2, got {self.num_classes}")

    def to_dict(self) -> Dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "reduce_channels": self.reduce_channels,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
            "ablation": self.ablation.row.value,
            "pyramid_levels": self.ablation.pyramid_levels,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SegModelConfig":
        return cls(
            in_channels=int(data["in_channels"]),
            widths=tuple(int(w) for w in data["widths"]),
            reduce_channels=int(data["reduce_channels"]),
            embed_dim=int(data["embed_dim"]),
            num_classes=int(data["num_classes"]),
            ablation=AblationSpec(AblationRow(data["ablation"]), int(data["pyramid_levels"])),
        )


# stride of each backbone block
BLOCK_STRIDES = (1, 2, 2, 1)

GraphHead = Union[SpyGRParams, PyramidConfig, None]


@dataclass
class SegModel:
    """
    Weights of the segmentation network.

    Attributes:
        config: architecture
        weights: backbone, reduction and classifier tensors by name
        graph: graph-reasoning head (None for the FCN row)
    """
    config: SegModelConfig
    weights: Dict[str, Tensor]
    graph: GraphHead = None

    def named_tensors(self) -> Dict[str, Tensor]:
        """Every learnable tensor under a flat dotted name."""
        named = dict(self.weights)
        if isinstance(self.graph, SpyGRParams):
            named.update({f"graph.{k}": v for k, v in self.graph.tensors().items()})
        elif isinstance(self.graph, PyramidConfig):
            for i, params in enumerate(self.graph.per_level_params):
                named.update({f"graph.level{i}.{k}": v for k, v in params.tensors().items()})
        return named

    def with_tensors(self, named: Dict[str, Tensor]) -> "SegModel":
        """Copy with tensors replaced by name (unknown names are ignored)."""
        weights = {k: named.get(k, v) for k, v in self.weights.items()}
        graph = self.graph
        if isinstance(graph, SpyGRParams):
            graph = graph.with_tensors(_strip(named, "graph."))
        elif isinstance(graph, PyramidConfig):
            levels = [p.with_tensors(_strip(named, f"graph.level{i}."))
                      for i, p in enumerate(graph.per_level_params)]
            graph = replace(graph, per_level_params=levels)
        return SegModel(self.config, weights, graph)

    def graph_levels(self) -> List[SpyGRParams]:
        """Graph params per pyramid level, finest first (empty for FCN)."""
        if isinstance(self.graph, SpyGRParams):
            return [self.graph]
        if isinstance(self.graph, PyramidConfig):
            return [self.graph.params_for(i) for i in range(self.graph.levels)]
        return []

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


def _strip(named: Dict[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in named.items() if k.startswith(prefix) and "." not in k[len(prefix):]}


def _kaiming(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, name: str) -> Tensor:
    return Tensor.uniform(shape, float(np.sqrt(6.0 / fan_in)), rng, dtype=DType.F64, name=name)


def init_model(config: SegModelConfig, seed: int = 0) -> SegModel:
    """
    Seeded initialization.

    Convolutions use He-uniform bounds, the classifiers and graph head use
    uniform(-k, k) with k = fan_in^-1/2, biases start at zero.
    """
    rng = np.random.default_rng(seed)
    weights: Dict[str, Tensor] = {}
    c_in = config.in_channels
    for i, width in enumerate(config.widths, start=1):
        weights[f"block{i}.w"] = _kaiming((width, c_in, 3, 3), c_in * 9, rng, f"block{i}.w")
        weights[f"block{i}.b"] = Tensor.zeros((width,), name=f"block{i}.b")
        c_in = width
    r = config.reduce_channels
    weights["reduce.w"] = _kaiming((r, c_in, 3, 3), c_in * 9, rng, "reduce.w")
    weights["reduce.b"] = Tensor.zeros((r,), name="reduce.b")
    k = config.num_classes
    weights["classifier.w"] = Tensor.uniform((r, k), r ** -0.5, rng, name="classifier.w")
    weights["classifier.b"] = Tensor.zeros((k,), name="classifier.b")
    aux_in = config.widths[2]
    weights["aux.w"] = Tensor.uniform((aux_in, k), aux_in ** -0.5, rng, name="aux.w")
    weights["aux.b"] = Tensor.zeros((k,), name="aux.b")

    spec = config.ablation
    graph: GraphHead = None
    if spec.uses_graph:
        def make() -> SpyGRParams:
            return SpyGRParams.init(r, config.embed_dim, r, spec.attention_mode,
                                    spec.include_identity, rng=rng)

        if spec.levels > 1:
            graph = PyramidConfig(spec.levels, [make() for _ in range(spec.levels)])
        else:
            graph = make()
    model = SegModel(config, weights, graph)
    logger.debug(f"Initialized {spec.row.value} model with {model.parameter_count} parameters")
    return model


def features(model: SegModel, images: Tensor) -> Tuple[Tensor, Tensor]:
    """Backbone pass: (reduced features at 1/4 resolution, block-3 features)."""
    x = images
    block3 = None
    for i, stride in enumerate(BLOCK_STRIDES, start=1):
        x = ops.relu(ops.conv3x3(x, model.weights[f"block{i}.w"], model.weights[f"block{i}.b"], stride=stride))
        if i == 3:
            block3 = x
    reduced = ops.relu(ops.conv3x3(x, model.weights["reduce.w"], model.weights["reduce.b"]))
    return reduced, block3


def graph_head(model: SegModel, x: Tensor) -> Tensor:
    if isinstance(model.graph, PyramidConfig):
        return spygr_pyramid(x, model.graph)
    if isinstance(model.graph, SpyGRParams):
        return graph_reason(x, model.graph)
    return x


def forward(model: SegModel, images: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Args:
        images: [N, 3, H, W]

    Returns:
        (final logits, auxiliary logits), both [N, K, H, W]
    """
    h, w = images.shape[2], images.shape[3]
    reduced, block3 = features(model, images)
    reasoned = graph_head(model, reduced)
    logits = ops.conv1x1(reasoned, model.weights["classifier.w"], model.weights["classifier.b"])
    aux = ops.conv1x1(block3, model.weights["aux.w"], model.weights["aux.b"])
    return ops.upsample_bilinear(logits, h, w), ops.upsample_bilinear(aux, h, w)


def predict(model: SegModel, images: Tensor) -> np.ndarray:
    """Arg-max class map [N, H, W]."""
    logits, _ = forward(model, images)
    return logits.data.argmax(axis=1)


# =============================================================================
# Persistence
# =============================================================================

def save_model(model: SegModel, directory: str) -> str:
    """Backbone tensors and `model.json` in `directory`, graph head under `graph/`."""
    entries = save_tensor_set(directory, model.weights, {})
    graph_dir = None
    if isinstance(model.graph, PyramidConfig):
        graph_dir = "graph"
        save_pyramid(model.graph, os.path.join(directory, graph_dir))
    elif isinstance(model.graph, SpyGRParams):
        graph_dir = "graph"
        save_params(model.graph, os.path.join(directory, graph_dir))
    path = os.path.join(directory, "model.json")
    error = save_json_file(path, {
        "kind": "seg_model",
        "config": model.config.to_dict(),
        "tensors": entries,
        "graph_dir": graph_dir,
    })
    if error:
        raise ConfigError("model", error)
    return path


def load_graph_head(directory: str) -> GraphHead:
    """Pyramid or single-layer params, whichever manifest the directory holds."""
    if os.path.exists(os.path.join(directory, "pyramid.json")):
        return load_pyramid(directory)
    return load_params(directory)


def load_model(directory: str) -> SegModel:
    manifest, error = load_json_file(os.path.join(directory, "model.json"))
    if error:
        raise ConfigError("model", error)
    config = SegModelConfig.from_dict(manifest["config"])
    weights = load_tensor_set(directory, manifest["tensors"])
    graph = None
    if manifest.get("graph_dir"):
        graph = load_graph_head(os.path.join(directory, manifest["graph_dir"]))
    return SegModel(config, weights, graph)
