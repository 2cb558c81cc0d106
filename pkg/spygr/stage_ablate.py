"""
Ablation workflow: train every requested row under several seeds.

Writes ablation_report.json (per-row mIoU, ordering and the baseline gap
gate) and ablation_table.md.
"""

import logging
from typing import Any, Dict, List, Optional

from .core.errors import ConfigError
from .harness.ablation import MIN_SEEDS, AblationThresholds, run_ablation
from .harness.model import AblationSpec
from .harness.train import TrainConfig
from .utils.stage_base import StageBase

logger = logging.getLogger(__name__)

TABLE_FILENAME = "ablation_table.md"
ABLATE_ONLY_KEYS = ("rows", "num_seeds", "gap_points", "chance_margin_points", "min_seeds_passing")


def parse_rows(value: Any, pyramid_levels: int) -> List[AblationSpec]:
    """'all', a comma-separated string or a list of row names."""
    if value in (None, "all"):
        return AblationSpec.ladder(pyramid_levels)
    names = value.split(",") if isinstance(value, str) else list(value)
    specs = [AblationSpec.parse(n.strip(), pyramid_levels) for n in names if str(n).strip()]
    if not specs:
        raise ConfigError("ablation", "no rows requested")
    return specs


class StageAblate(StageBase):
    """Ablation ladder over seeds seed, seed+1, ..."""

    stage_name = "Ablation"
    subcommand = "ablate"
    report_filename = "ablation_report.json"

    def process(self) -> Dict[str, Any]:
        num_seeds = int(self.config["num_seeds"])
        if num_seeds < MIN_SEEDS:
            raise ConfigError("num_seeds", f"must be >= {MIN_SEEDS}, got {num_seeds}")
        seeds = [self.seed + i for i in range(num_seeds)]

        settings = {k: v for k, v in self.config.items() if k not in ABLATE_ONLY_KEYS}
        base = TrainConfig.from_dict(settings)
        specs = parse_rows(self.config["rows"], base.ablation.pyramid_levels)
        thresholds = AblationThresholds(
            gap_points=float(self.config["gap_points"]),
            chance_margin_points=float(self.config["chance_margin_points"]),
            min_seeds_passing=int(self.config["min_seeds_passing"]),
        )
        self.logger.info(f"Rows {[s.row.value for s in specs]} x seeds {seeds}")

        table = run_ablation(specs, seeds, base, thresholds)

        table_path = self.get_output_path(TABLE_FILENAME)
        with open(table_path, "w", encoding="utf-8") as f:
            f.write(table.to_markdown() + "\n")
        self.record_output(table_path)

        gate = table.gap_report()
        if gate.get("available"):
            self.logger.info(f"Gap gate: {gate['seeds_passing']}/{len(seeds)} seeds passing, "
                             f"locality cap {'ok' if gate['locality_cap_ok'] else 'exceeded'}")
        return {"seeds": seeds, "config": base.to_dict(), "table": table.to_dict()}


_train_defaults = TrainConfig().to_dict()
_train_defaults.pop("ablation")

ABLATE_DEFAULTS: Dict[str, Any] = dict(
    _train_defaults,
    rows="all",
    num_seeds=MIN_SEEDS,
    gap_points=AblationThresholds().gap_points,
    chance_margin_points=AblationThresholds().chance_margin_points,
    min_seeds_passing=AblationThresholds().min_seeds_passing,
)

# CLI flag -> config key
FLAG_ALIASES = {
    "iters": "total_iters",
    "samples": "train_samples",
    "m": "embed_dim",
    "levels": "pyramid_levels",
    "ablation": "rows",
}


def run_ablate(config: Dict[str, Any], output_dir: Optional[str] = None):
    """Execute the ablation workflow."""
    return StageAblate(config, output_dir).run()
