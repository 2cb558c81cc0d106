"""
Closed-form FLOP and activation-memory accounting.

One FLOP is one multiply-accumulate. The analytic terms mirror, kernel by
kernel, what the instrumented `MacCounter` observes on the factored path,
without sharing any code with it.

Pyramid reports keep the resampling work (pooling, upsampling, aggregation)
in a separate `resample` tally: `flops` is the graph-reasoning total summed
over levels, `total_macs` adds the resampling and is what the counter sees.

Units: "G" is binary giga (2^30 MACs) and "M" is MiB (2^20 bytes), not
decimal. Under them the [1, 512, 97, 97], M = 64 reference configuration
reads 3.16 G single-scale and 4.22 G for a four-level pyramid; decimal
readings are about 7% larger.
"""

from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Optional

from .counter import MacCounter
from .layer import AttentionMode

logger = logging.getLogger(__name__)

GIGA = 2 ** 30
MEGA = 2 ** 20
F32_BYTES = 4


@dataclass
class CostReport:
    """
    FLOP and peak activation estimate for one configuration.

    `gflops` divides by 2^30 and `memory_mb` by 2^20 (binary units).

    Attributes:
        flops: graph-reasoning multiply-accumulates, equal to the sum of `breakdown`
        peak_activation_bytes: activations retained for the backward pass
        breakdown: labeled FLOP subtotals
        resample: pyramid pooling/upsampling/aggregation MACs, outside `flops`
        memory_breakdown: labeled byte subtotals
        config: the inputs the report was computed for
    """
    flops: int
    peak_activation_bytes: int = 0
    breakdown: Dict[str, int] = field(default_factory=dict)
    resample: Dict[str, int] = field(default_factory=dict)
    memory_breakdown: Dict[str, int] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.flops != sum(self.breakdown.values()):
            raise ValueError(f"flops {self.flops} != breakdown sum {sum(self.breakdown.values())}")

    @property
    def resample_flops(self) -> int:
        return sum(self.resample.values())

    @property
    def total_macs(self) -> int:
        """Everything the instrumented counter observes."""
        return self.flops + self.resample_flops

    @property
    def gflops(self) -> float:
        return self.flops / GIGA

    @property
    def memory_mb(self) -> float:
        return self.peak_activation_bytes / MEGA

    def to_dict(self) -> Dict:
        return {
            "config": dict(self.config),
            "flops": self.flops,
            "gflops": round(self.gflops, 6),
            "peak_activation_bytes": self.peak_activation_bytes,
            "memory_mb": round(self.memory_mb, 6),
            "breakdown": dict(self.breakdown),
            "resample": dict(self.resample),
            "resample_flops": self.resample_flops,
            "total_macs": self.total_macs,
            "memory_breakdown": dict(self.memory_breakdown),
        }

    def to_table(self) -> str:
        """Aligned text table of the breakdown."""
        rows = [(label, f"{value:,}", f"{value / GIGA:.4f}") for label, value in self.breakdown.items()]
        rows.append(("total", f"{self.flops:,}", f"{self.gflops:.4f}"))
        if self.resample:
            rows.extend((f"resample.{label}", f"{value:,}", f"{value / GIGA:.4f}")
                        for label, value in self.resample.items())
            rows.append(("total+resample", f"{self.total_macs:,}", f"{self.total_macs / GIGA:.4f}"))
        width = max(len(r[0]) for r in rows)
        num_width = max(len(r[1]) for r in rows)
        lines = [f"{'term':<{width}}  {'MACs':>{num_width}}  {'G':>8}"]
        lines.append("-" * len(lines[0]))
        for label, macs, giga in rows:
            lines.append(f"{label:<{width}}  {macs:>{num_width}}  {giga:>8}")
        if self.peak_activation_bytes:
            lines.append("")
            lines.append(f"peak activations: {self.peak_activation_bytes:,} bytes ({self.memory_mb:.2f} M)")
        return "\n".join(lines)


def _merge(into: Dict[str, int], terms: Dict[str, int], prefix: str = "") -> None:
    for key, value in terms.items():
        label = f"{prefix}{key}"
        into[label] = into.get(label, 0) + value


def _layer_terms(
    h: int, w: int, c: int, m: int, c_out: int,
    include_identity: bool, attention_mode: AttentionMode,
) -> Dict[str, int]:
    n = h * w
    weighted = attention_mode is not AttentionMode.NONE
    terms = {
        "embed": n * c * m,
        "attention": c * m if attention_mode is AttentionMode.DYNAMIC else 0,
        "degree": 2 * n * m + (m if weighted else 0),
        "laplacian_apply": n * m + 2 * n * m * c + (m * c if weighted else 0),
        "identity": n * c if include_identity else 0,
        "theta": n * c * c_out,
    }
    return terms


def _check_positive(**extents: int) -> None:
    for name, value in extents.items():
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")


def flops_graph_reason(
    height: int,
    width: int,
    channels: int,
    embed_dim: int,
    out_channels: Optional[int] = None,
    include_identity: bool = True,
    attention_mode: AttentionMode = AttentionMode.DYNAMIC,
    batch: int = 1,
) -> CostReport:
    """Analytic MAC count of one factored graph-reasoning block."""
    out_channels = out_channels or channels
    _check_positive(height=height, width=width, channels=channels, embed_dim=embed_dim,
                    out_channels=out_channels, batch=batch)
    terms = _layer_terms(height, width, channels, embed_dim, out_channels,
                         include_identity, AttentionMode(attention_mode))
    terms = {k: v * batch for k, v in terms.items()}
    return CostReport(
        flops=sum(terms.values()),
        breakdown=terms,
        config={
            "height": height, "width": width, "channels": channels, "embed_dim": embed_dim,
            "out_channels": out_channels, "include_identity": include_identity,
            "attention_mode": AttentionMode(attention_mode).value, "batch": batch, "levels": 1,
        },
    )


def _level_extents(height: int, width: int, levels: int) -> List[tuple]:
    extents = [(height, width)]
    for _ in range(levels - 1):
        h, w = extents[-1]
        extents.append(((h + 1) // 2, (w + 1) // 2))
    return extents


def flops_pyramid(
    height: int,
    width: int,
    channels: int,
    embed_dim: int,
    out_channels: Optional[int] = None,
    levels: int = 4,
    include_identity: bool = True,
    attention_mode: AttentionMode = AttentionMode.DYNAMIC,
    batch: int = 1,
) -> CostReport:
    """
    Analytic MAC count of the spatial pyramid.

    `flops` sums per-level graph reasoning over ceil-halved extents, so for
    square inputs it stays within the geometric series 1 + 1/4 + 1/16 + ...
    of the single-scale count. The `resample` tally holds one comparison per
    pooled input element, 8 MACs per upsampled output element and one
    addition per aggregated element.
    """
    out_channels = out_channels or channels
    _check_positive(height=height, width=width, channels=channels, embed_dim=embed_dim,
                    out_channels=out_channels, levels=levels, batch=batch)
    extents = _level_extents(height, width, levels)
    breakdown: Dict[str, int] = {}
    resample: Dict[str, int] = {}
    for level, (h, w) in enumerate(extents):
        terms = _layer_terms(h, w, channels, embed_dim, out_channels,
                             include_identity, AttentionMode(attention_mode))
        _merge(breakdown, {k: v * batch for k, v in terms.items()}, prefix=f"level{level}.")
    if levels > 1:
        finer = extents[:-1]
        resample["pool"] = batch * channels * sum(h * w for h, w in finer)
        resample["upsample"] = batch * 8 * out_channels * sum(h * w for h, w in finer)
        resample["aggregate"] = batch * out_channels * sum(h * w for h, w in finer)
    return CostReport(
        flops=sum(breakdown.values()),
        breakdown=breakdown,
        resample=resample,
        config={
            "height": height, "width": width, "channels": channels, "embed_dim": embed_dim,
            "out_channels": out_channels, "include_identity": include_identity,
            "attention_mode": AttentionMode(attention_mode).value, "batch": batch, "levels": levels,
        },
    )


def _layer_activations(h: int, w: int, c: int, m: int, c_out: int,
                       include_identity: bool, attention_mode: AttentionMode) -> Dict[str, int]:
    """Element counts of tensors the factored path keeps for backward."""
    n = h * w
    weighted = attention_mode is not AttentionMode.NONE
    acts = {
        "input": n * c,
        "embed_pre": n * m,
        "embed": n * m,
        "attention": 2 * m if attention_mode is AttentionMode.DYNAMIC else 0,
        "degree": n + m * (2 if weighted else 1),
        "projection": 2 * n + n * m,
        "projected_features": m * c * (2 if weighted else 1),
        "smoothed": n * c,
        "laplacian": n * c if include_identity else 0,
        "theta_pre": n * c_out,
        "output": n * c_out,
    }
    return acts


def memory_estimate(
    height: int,
    width: int,
    channels: int,
    embed_dim: int,
    out_channels: Optional[int] = None,
    levels: int = 1,
    include_identity: bool = True,
    attention_mode: AttentionMode = AttentionMode.DYNAMIC,
    batch: int = 1,
    bytes_per_value: int = F32_BYTES,
) -> CostReport:
    """
    Peak activation bytes along the factored path (f32 sizing).

    Every activation produced on the forward path is retained for the
    backward pass, so the peak is their sum at the end of the forward pass.
    The returned report also carries the matching FLOP count.
    """
    out_channels = out_channels or channels
    flops = (flops_graph_reason(height, width, channels, embed_dim, out_channels,
                                include_identity, attention_mode, batch)
             if levels == 1 else
             flops_pyramid(height, width, channels, embed_dim, out_channels, levels,
                           include_identity, attention_mode, batch))
    extents = _level_extents(height, width, levels)
    memory: Dict[str, int] = {}
    for level, (h, w) in enumerate(extents):
        acts = _layer_activations(h, w, channels, embed_dim, out_channels,
                                  include_identity, AttentionMode(attention_mode))
        _merge(memory, {k: v * batch * bytes_per_value for k, v in acts.items()}, prefix=f"level{level}.")
    if levels > 1:
        finer = sum(h * w for h, w in extents[:-1])
        memory["upsampled"] = batch * out_channels * finer * bytes_per_value
        memory["aggregated"] = batch * out_channels * finer * bytes_per_value
    return CostReport(
        flops=flops.flops,
        peak_activation_bytes=sum(memory.values()),
        breakdown=flops.breakdown,
        resample=flops.resample,
        memory_breakdown=memory,
        config=dict(flops.config, bytes_per_value=bytes_per_value),
    )


def count_macs(fn: Callable[[], object]) -> int:
    """Run `fn` under a fresh instrumented counter and return the MACs executed."""
    with MacCounter() as counter:
        fn()
    return counter.total
