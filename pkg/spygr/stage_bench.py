"""
Benchmark workflow: analytic cost of the graph-reasoning block and pyramid.

Writes the single-scale and pyramid CostReports as canonical JSON plus an
aligned text table, and times the factored Laplacian against the dense
oracle. Wall times go to their own file so the cost report stays
byte-identical between runs.
"""

import logging
import time
from typing import Any, Callable, Dict, Optional

import numpy as np

from .core.costmodel import GIGA, CostReport, memory_estimate
from .core.errors import ConfigError, OracleSizeError
from .core.layer import (
    DEFAULT_ORACLE_CAP,
    AttentionMode,
    LaplacianPath,
    SpyGRParams,
    apply_laplacian,
    build_factors,
)
from .core.pyramid import max_levels
from .core.tensor import Tensor
from .utils.config_loader import parse_int_list
from .utils.stage_base import StageBase

logger = logging.getLogger(__name__)

TABLE_FILENAME = "bench_table.txt"
TIMING_FILENAME = "bench_timing.json"

# Largest grid the dense oracle accepts at the default cap (64 x 64).
REFERENCE_EXTENT = 64


def cost_reports(shape, embed_dim: int, levels: int, out_channels: Optional[int] = None,
                 attention_mode: AttentionMode = AttentionMode.DYNAMIC,
                 include_identity: bool = True) -> Dict[str, CostReport]:
    """Single-scale and pyramid reports for an [N,C,H,W] input."""
    n, c, h, w = shape
    if levels < 1 or levels > max_levels(h, w):
        raise ConfigError("levels", f"{levels} not in [1, {max_levels(h, w)}] for {h}x{w}")
    common = dict(height=h, width=w, channels=c, embed_dim=embed_dim, out_channels=out_channels,
                  include_identity=include_identity, attention_mode=attention_mode, batch=n)
    return {
        "single_scale": memory_estimate(levels=1, **common),
        "pyramid": memory_estimate(levels=levels, **common),
    }


def render_table(reports: Dict[str, CostReport]) -> str:
    sections = []
    for name, report in reports.items():
        sections.append(f"== {name} (levels={report.config['levels']}) ==")
        sections.append(report.to_table())
        sections.append("")
    return "\n".join(sections)


def _best_time(fn: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def time_laplacian(channels: int, height: int, width: int, embed_dim: int,
                   seed: int, oracle_cap: int, repeats: int = 3) -> Dict[str, Any]:
    """
    Wall time of one factored and one dense Laplacian application.

    The dense path is skipped, with the refusal message recorded, when the
    grid exceeds `oracle_cap`.
    """
    rng = np.random.default_rng(seed)
    params = SpyGRParams.init(channels, embed_dim, rng=rng)
    x = Tensor(rng.standard_normal((1, channels, height, width)), name="x")
    factors = build_factors(x, params)

    result: Dict[str, Any] = {
        "channels": channels, "height": height, "width": width,
        "n": height * width, "embed_dim": embed_dim, "repeats": repeats,
    }
    result["factored_seconds"] = _best_time(
        lambda: apply_laplacian(x, factors, True, LaplacianPath.FACTORED), repeats)
    try:
        result["naive_seconds"] = _best_time(
            lambda: apply_laplacian(x, factors, True, LaplacianPath.NAIVE, oracle_cap), repeats)
        result["speedup"] = result["naive_seconds"] / max(result["factored_seconds"], 1e-12)
    except OracleSizeError as exc:
        logger.info(f"Naive timing skipped: {exc.message}")
        result["naive_refused"] = exc.message
    return result


class StageBench(StageBase):
    """FLOP, memory and wall-time benchmark."""

    stage_name = "Benchmark"
    subcommand = "bench"
    report_filename = "bench_report.json"

    def process(self) -> Dict[str, Any]:
        shape = parse_int_list(self.config["shape"], "shape", length=4)
        if min(shape) < 1:
            raise ConfigError("shape", f"extents must be positive, got {shape}")
        m = int(self.config["m"])
        levels = int(self.config["levels"])
        mode = AttentionMode(self.config["attention_mode"])

        reports = cost_reports(shape, m, levels, self.config["out_channels"], mode,
                               bool(self.config["include_identity"]))
        for name, report in reports.items():
            self.logger.info(f"{name}: {report.gflops:.4f} G, +{report.resample_flops / GIGA:.4f} G resampling, "
                             f"{report.memory_mb:.2f} M activations")

        table_path = self.get_output_path(TABLE_FILENAME)
        with open(table_path, "w", encoding="utf-8") as f:
            f.write(render_table(reports))
        self.record_output(table_path)

        if self.config["timing"]:
            self.save_output(self._timings(shape, m), TIMING_FILENAME)

        return {
            "shape": shape,
            "embed_dim": m,
            "levels": levels,
            "reports": {name: report.to_dict() for name, report in reports.items()},
        }

    def _timings(self, shape, m: int) -> Dict[str, Any]:
        _, c, h, w = shape
        cap = int(self.config["oracle_cap"])
        repeats = int(self.config["repeats"])
        timings = {"requested": time_laplacian(c, h, w, m, self.seed, cap, repeats)}
        if "naive_refused" in timings["requested"]:
            side = min(REFERENCE_EXTENT, int(np.sqrt(cap)))
            timings["reference"] = time_laplacian(c, side, side, m, self.seed, cap, repeats)
        return timings


BENCH_DEFAULTS = {
    "seed": 0,
    "shape": "1,512,97,97",
    "m": 64,
    "levels": 4,
    "out_channels": None,
    "attention_mode": AttentionMode.DYNAMIC.value,
    "include_identity": True,
    "oracle_cap": DEFAULT_ORACLE_CAP,
    "timing": True,
    "repeats": 3,
}


def run_bench(config: Dict[str, Any], output_dir: Optional[str] = None):
    """Execute the benchmark workflow."""
    return StageBench(config, output_dir).run()
