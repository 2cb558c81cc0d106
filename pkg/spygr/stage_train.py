"""
Training workflow: one ablation row on the synthetic long-range task.

Outputs under the run directory:
- trace.csv            per-iteration lr, loss, aux loss (mIoU on eval rows)
- model/               backbone tensors, model.json and the graph head
- train_report.json    resolved settings and the final test evaluation
"""

import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from .harness.dataset import SyntheticSample, generate_dataset, load_dataset, save_dataset
from .harness.model import save_model
from .harness.train import TEST_SEED_OFFSET, TrainConfig, train, write_trace
from .utils.stage_base import StageBase

logger = logging.getLogger(__name__)

TRACE_FILENAME = "trace.csv"
MODEL_DIRNAME = "model"

# CLI flag -> TrainConfig key
FLAG_ALIASES = {
    "iters": "total_iters",
    "samples": "train_samples",
    "m": "embed_dim",
    "levels": "pyramid_levels",
}


def _cached_split(cache_dir: str, name: str, n: int, config: TrainConfig, seed: int) -> List[SyntheticSample]:
    """Load a split from `cache_dir/name`, generating and caching it on a miss."""
    directory = os.path.join(cache_dir, name)
    if os.path.exists(os.path.join(directory, "index.json")):
        samples = load_dataset(directory)
        if len(samples) == n and samples[0].image.shape[1:] == (config.height, config.width):
            logger.info(f"Loaded {n} cached {name} samples from {directory}")
            return samples
        logger.info(f"Cached {name} split in {directory} does not match the config; regenerating")
    samples = generate_dataset(n, config.height, config.width, seed, config.num_classes)
    save_dataset(samples, directory, meta={"seed": seed, "num_classes": config.num_classes})
    return samples


def load_splits(config: TrainConfig, cache_dir: Optional[str]) -> Tuple[List[SyntheticSample], List[SyntheticSample]]:
    if not cache_dir:
        return (
            generate_dataset(config.train_samples, config.height, config.width, config.seed, config.num_classes),
            generate_dataset(config.test_samples, config.height, config.width,
                             config.seed + TEST_SEED_OFFSET, config.num_classes),
        )
    return (
        _cached_split(cache_dir, f"train_seed{config.seed}", config.train_samples, config, config.seed),
        _cached_split(cache_dir, f"test_seed{config.seed}", config.test_samples, config,
                      config.seed + TEST_SEED_OFFSET),
    )


class StageTrain(StageBase):
    """Train one model and record its trace, weights and evaluation."""

    stage_name = "Training"
    subcommand = "train"
    report_filename = "train_report.json"

    def process(self) -> Dict[str, Any]:
        settings = {k: v for k, v in self.config.items() if k != "dataset_cache"}
        config = TrainConfig.from_dict(settings)
        train_set, test_set = load_splits(config, self.config.get("dataset_cache"))
        self.logger.info(f"Data: {len(train_set)} train / {len(test_set)} test samples "
                         f"at {config.height}x{config.width}")

        result = train(config, train_set, test_set)

        trace_path = write_trace(result.trace, self.get_output_path(TRACE_FILENAME))
        self.record_output(trace_path)
        model_dir = self.ensure_output_dir(MODEL_DIRNAME)
        self.record_output(save_model(result.model, model_dir))

        metrics = result.metrics
        self.logger.info(f"Final loss {result.final_loss:.4f}, test mIoU {metrics.miou:.4f}, "
                         f"keyed accuracy {metrics.keyed_accuracy:.4f}")
        return {
            "config": config.to_dict(),
            "parameters": result.model.parameter_count,
            "result": result.to_dict(),
        }


TRAIN_DEFAULTS: Dict[str, Any] = dict(TrainConfig().to_dict(), dataset_cache=None)


def run_train(config: Dict[str, Any], output_dir: Optional[str] = None):
    """Execute the training workflow."""
    return StageTrain(config, output_dir).run()
