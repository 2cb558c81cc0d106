"""
Ablation runner: every requested row trained once per seed on shared data.
"""

from dataclasses import dataclass, field, replace
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ConfigError
from .dataset import generate_dataset
from .model import AblationRow, AblationSpec
from .train import TEST_SEED_OFFSET, TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

MIN_SEEDS = 3


@dataclass(frozen=True)
class AblationThresholds:
    """Acceptance knobs, in mIoU / accuracy points (0-100)."""
    gap_points: float = 10.0
    chance_margin_points: float = 10.0
    min_seeds_passing: int = 2


@dataclass
class RowResult:
    spec: AblationSpec
    seeds: List[int]
    miou: List[float]
    keyed_accuracy: List[float]
    final_loss: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.miou))

    @property
    def stdev(self) -> float:
        return float(np.std(self.miou))

    @property
    def keyed_mean(self) -> float:
        return float(np.mean(self.keyed_accuracy))

    def to_dict(self) -> Dict:
        return {
            "row": self.spec.row.value,
            "seeds": self.seeds,
            "miou": self.miou,
            "keyed_accuracy": self.keyed_accuracy,
            "final_loss": self.final_loss,
            "miou_mean": self.mean,
            "miou_stdev": self.stdev,
            "keyed_accuracy_mean": self.keyed_mean,
        }


@dataclass
class AblationTable:
    rows: List[RowResult]
    num_classes: int
    thresholds: AblationThresholds = field(default_factory=AblationThresholds)

    def row(self, which: AblationRow) -> Optional[RowResult]:
        for r in self.rows:
            if r.spec.row is AblationRow(which):
                return r
        return None

    @property
    def ordering(self) -> List[str]:
        """Row names sorted by mean mIoU, lowest first."""
        return [r.spec.row.value for r in sorted(self.rows, key=lambda r: (r.mean, r.spec.rank))]

    def gap_report(self) -> Dict:
        """
        Per-seed mIoU gap between the baseline and the most complete row.

        The gate passes when the gap reaches `gap_points` on at least
        `min_seeds_passing` seeds, and the baseline stays within
        `chance_margin_points` of chance on keyed regions.
        """
        baseline = self.row(AblationRow.FCN)
        full = max(self.rows, key=lambda r: r.spec.rank)
        if baseline is None or full is baseline:
            return {"available": False}
        gaps = [100.0 * (f - b) for f, b in zip(full.miou, baseline.miou)]
        passing = sum(g >= self.thresholds.gap_points for g in gaps)
        chance = 100.0 / self.num_classes
        keyed = 100.0 * baseline.keyed_mean
        return {
            "available": True,
            "baseline": baseline.spec.row.value,
            "full": full.spec.row.value,
            "gaps_points": gaps,
            "seeds_passing": passing,
            "gap_ok": passing >= self.thresholds.min_seeds_passing,
            "baseline_keyed_accuracy_points": keyed,
            "chance_points": chance,
            "locality_cap_ok": keyed <= chance + self.thresholds.chance_margin_points,
        }

    def to_dict(self) -> Dict:
        return {
            "rows": self.rows,
            "ordering": self.ordering,
            "gap_report": self.gap_report(),
            "thresholds": {
                "gap_points": self.thresholds.gap_points,
                "chance_margin_points": self.thresholds.chance_margin_points,
                "min_seeds_passing": self.thresholds.min_seeds_passing,
            },
        }

    def to_markdown(self) -> str:
        lines = ["| row | mIoU mean | stdev | keyed acc | per seed |", "|---|---|---|---|---|"]
        for r in self.rows:
            per_seed = ", ".join(f"{100 * m:.2f}" for m in r.miou)
            lines.append(f"| {r.spec.row.value} | {100 * r.mean:.2f} | {100 * r.stdev:.2f} "
                         f"| {100 * r.keyed_mean:.2f} | {per_seed} |")
        return "\n".join(lines)


def run_ablation(
    specs: Sequence[AblationSpec],
    seeds: Sequence[int],
    base_config: Optional[TrainConfig] = None,
    thresholds: Optional[AblationThresholds] = None,
) -> AblationTable:
    """
    Train each spec under each seed and tabulate test mIoU.

    Every row sees the same training and test data for a given seed, so
    rows differ only in the graph head.

    Args:
        specs: ablation rows to run
        seeds: at least three seeds
        base_config: schedule and data settings shared by all rows

    Returns:
        AblationTable with per-row mean and population standard deviation.
    """
    if len(seeds) < MIN_SEEDS:
        raise ConfigError("seeds", f"ablation needs >= {MIN_SEEDS} seeds, got {len(seeds)}")
    if not specs:
        raise ConfigError("ablation", "no rows requested")
    rows_requested = [s.row.value for s in specs]
    duplicated = sorted({r for r in rows_requested if rows_requested.count(r) > 1})
    if duplicated:
        raise ConfigError("ablation", f"rows requested more than once: {', '.join(duplicated)}")
    base = base_config or TrainConfig()
    results: Dict[AblationRow, List[TrainResult]] = {s.row: [] for s in specs}

    for seed in seeds:
        train_set = generate_dataset(base.train_samples, base.height, base.width, seed, base.num_classes)
        test_set = generate_dataset(base.test_samples, base.height, base.width,
                                    seed + TEST_SEED_OFFSET, base.num_classes)
        for spec in specs:
            logger.info(f"Ablation row {spec.row.value}, seed {seed}")
            config = replace(base, ablation=spec, seed=seed)
            results[spec.row].append(train(config, train_set, test_set))

    rows = [
        RowResult(
            spec=spec,
            seeds=list(seeds),
            miou=[r.metrics.miou for r in results[spec.row]],
            keyed_accuracy=[r.metrics.keyed_accuracy for r in results[spec.row]],
            final_loss=[r.final_loss for r in results[spec.row]],
        )
        for spec in specs
    ]
    return AblationTable(rows, base.num_classes, thresholds or AblationThresholds())
