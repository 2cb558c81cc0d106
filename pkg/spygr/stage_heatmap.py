"""
Heatmap workflow: similarity of one queried pixel to every other location.

For each pyramid level s the row A_i of the implicit similarity at the
pixel (row >> s, col >> s) is reshaped to the level grid, min-max
normalized, bilinearly resized to the input size and written as an 8-bit
grayscale PGM (`level_<s>.pgm`) with a JSON sidecar of the raw row.

Graph weights come from `--params`:
- a trained model directory (model.json): the backbone runs on `--image`
  ([1,3,H,W]) or on a generated synthetic sample, and the pixel is given in
  image coordinates
- a pyramid (pyramid.json) or single-layer (manifest.json) directory: the
  layer runs directly on `--image` ([1,C,H,W]) or on seeded random features
- nothing: a freshly initialized pyramid sized by `--shape`, `--m`, `--levels`
"""

import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .core import ops
from .core.errors import ConfigError
from .core.layer import SimilarityFactors, SpyGRParams, build_factors, load_params, similarity_row
from .core.pyramid import PyramidConfig, downsample, load_pyramid, max_levels
from .core.serialization import load_tensor
from .core.tensor import Tensor
from .harness.dataset import generate_sample
from .harness.model import features, load_model
from .utils.config_loader import parse_int_list
from .utils.stage_base import StageBase

logger = logging.getLogger(__name__)

DEFAULT_FEATURE_SHAPE = (1, 16, 32, 32)
DEFAULT_IMAGE_EXTENT = 64
FLAT_TOLERANCE = 1e-12


# =============================================================================
# Heatmap math
# =============================================================================

def normalize_row(row: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a flat row maps to zeros."""
    lo, hi = float(np.min(row)), float(np.max(row))
    if hi - lo <= FLAT_TOLERANCE * max(abs(hi), 1.0):
        return np.zeros_like(row, dtype=np.float64)
    return (row - lo) / (hi - lo)


def heatmap_from_factors(factors: SimilarityFactors, row: int, col: int) -> Tuple[np.ndarray, np.ndarray]:
    """(raw similarity grid, normalized grid), both [h, w] of the factor grid."""
    if not (0 <= row < factors.height and 0 <= col < factors.width):
        raise ConfigError("pixel", f"({row}, {col}) outside the {factors.height}x{factors.width} grid")
    raw = similarity_row(factors, row * factors.width + col).reshape(factors.height, factors.width)
    return raw, normalize_row(raw)


def resize_to(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    if grid.shape == (height, width):
        return grid
    up = ops.upsample_bilinear(Tensor(grid[None, None]), height, width)
    return np.clip(up.data[0, 0], 0.0, 1.0)


def quantize(grid: np.ndarray) -> np.ndarray:
    return np.round(grid * 255.0).astype(np.uint8)


def write_pgm(path: str, pixels: np.ndarray) -> str:
    """Binary (P5) 8-bit grayscale."""
    Image.fromarray(pixels).save(path, format="PPM")
    return path


def level_heatmaps(x: Tensor, pyramid: PyramidConfig, row: int, col: int,
                   out_height: int, out_width: int) -> List[Dict[str, Any]]:
    """
    Heatmaps of pixel (row, col) of `x` at every pyramid level.

    Returns:
        One dict per level: level, grid extents, level pixel, raw row,
        quantized image at (out_height, out_width).
    """
    h, w = x.shape[2], x.shape[3]
    if not (0 <= row < h and 0 <= col < w):
        raise ConfigError("pixel", f"({row}, {col}) outside the {h}x{w} input")
    if pyramid.levels > max_levels(h, w):
        raise ConfigError("levels", f"{pyramid.levels} levels exceed the {max_levels(h, w)} allowed for {h}x{w}")

    results = []
    scale = x
    for level in range(pyramid.levels):
        if level:
            scale = downsample(scale)
        factors = build_factors(scale, pyramid.params_for(level))
        r, c = row >> level, col >> level
        raw, norm = heatmap_from_factors(factors, r, c)
        results.append({
            "level": level,
            "height": factors.height,
            "width": factors.width,
            "pixel": [r, c],
            "raw": raw,
            "image": quantize(resize_to(norm, out_height, out_width)),
        })
    return results


# =============================================================================
# Inputs
# =============================================================================

def _as_pyramid(head) -> PyramidConfig:
    if isinstance(head, PyramidConfig):
        return head
    if isinstance(head, SpyGRParams):
        return PyramidConfig(1, [head])
    raise ConfigError("params", "model has no graph head (fcn row); nothing to visualize")


def _load_image(path: str, channels: int) -> Tensor:
    image = load_tensor(path)
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != channels:
        raise ConfigError("image", f"expected [1,{channels},H,W], got {list(image.shape)}")
    return Tensor(image.data.astype(np.float64), name="image")


class StageHeatmap(StageBase):
    """Per-level similarity heatmaps for one pixel."""

    stage_name = "Heatmap"
    subcommand = "heatmap"
    report_filename = "heatmap_report.json"

    def _model_inputs(self, params_dir: str) -> Tuple[Tensor, PyramidConfig, int, int, int, int]:
        """Backbone features of the image; pixel mapped from image to feature grid."""
        model = load_model(params_dir)
        pyramid = _as_pyramid(model.graph)
        if self.config["image"]:
            images = _load_image(self.config["image"], model.config.in_channels)
        else:
            h, w = self._extents(DEFAULT_IMAGE_EXTENT, DEFAULT_IMAGE_EXTENT)
            sample = generate_sample(h, w, self.seed, num_classes=model.config.num_classes)
            images = Tensor(sample.image[None].astype(np.float64), name="image")
        height, width = images.shape[2], images.shape[3]
        row, col = self._pixel(height, width)
        reduced, _ = features(model, images)
        fh, fw = reduced.shape[2], reduced.shape[3]
        return reduced, pyramid, row * fh // height, col * fw // width, height, width

    def _layer_inputs(self, params_dir: Optional[str]) -> Tuple[Tensor, PyramidConfig, int, int, int, int]:
        if params_dir and os.path.exists(os.path.join(params_dir, "pyramid.json")):
            pyramid = load_pyramid(params_dir)
        elif params_dir:
            pyramid = _as_pyramid(load_params(params_dir))
        else:
            shape = self._shape()
            pyramid = PyramidConfig.build(shape[1], int(self.config["m"]), int(self.config["levels"]),
                                          seed=self.seed)
        channels = pyramid.params_for(0).channels
        if self.config["image"]:
            x = _load_image(self.config["image"], channels)
        else:
            _, c, h, w = self._shape()
            if c != channels:
                raise ConfigError("shape", f"channel count {c} does not match the {channels}-channel params")
            rng = np.random.default_rng(self.seed)
            x = Tensor(rng.standard_normal((1, c, h, w)), name="features")
        height, width = x.shape[2], x.shape[3]
        row, col = self._pixel(height, width)
        return x, pyramid, row, col, height, width

    def _shape(self) -> List[int]:
        shape = self.config["shape"]
        if shape is None:
            return list(DEFAULT_FEATURE_SHAPE)
        values = parse_int_list(shape, "shape", length=4)
        if values[0] != 1 or min(values) < 1:
            raise ConfigError("shape", f"heatmaps take a single positive [1,C,H,W] input, got {values}")
        return values

    def _extents(self, default_h: int, default_w: int) -> Tuple[int, int]:
        if self.config["shape"] is None:
            return default_h, default_w
        shape = self._shape()
        return shape[2], shape[3]

    def _pixel(self, height: int, width: int) -> Tuple[int, int]:
        if self.config["pixel"] is None:
            return height // 2, width // 2
        row, col = parse_int_list(self.config["pixel"], "pixel", length=2)
        if not (row < height and col < width):
            raise ConfigError("pixel", f"({row}, {col}) outside the {height}x{width} input")
        return row, col

    def process(self) -> Dict[str, Any]:
        params_dir = self.config["params"]
        if params_dir and os.path.exists(os.path.join(params_dir, "model.json")):
            x, pyramid, row, col, height, width = self._model_inputs(params_dir)
        else:
            x, pyramid, row, col, height, width = self._layer_inputs(params_dir)
        self.logger.info(f"Querying pixel ({row}, {col}) of a {x.shape[2]}x{x.shape[3]} grid "
                         f"over {pyramid.levels} level(s)")

        levels = level_heatmaps(x, pyramid, row, col, height, width)
        summary = []
        for item in levels:
            name = f"level_{item['level']}"
            self.record_output(write_pgm(self.get_output_path(f"{name}.pgm"), item["image"]))
            raw = item["raw"]
            self.save_output({
                "level": item["level"],
                "grid": [item["height"], item["width"]],
                "pixel": item["pixel"],
                "min": float(raw.min()),
                "max": float(raw.max()),
                "values": raw,
            }, f"{name}.json")
            summary.append({"level": item["level"], "grid": [item["height"], item["width"]],
                            "pixel": item["pixel"], "image": f"{name}.pgm"})
        return {"input_grid": [x.shape[2], x.shape[3]], "output_size": [height, width], "levels": summary}


HEATMAP_DEFAULTS = {
    "seed": 0,
    "shape": None,
    "m": 8,
    "levels": 4,
    "pixel": None,
    "params": None,
    "image": None,
}


def run_heatmap(config: Dict[str, Any], output_dir: Optional[str] = None):
    """Execute the heatmap workflow."""
    return StageHeatmap(config, output_dir).run()
