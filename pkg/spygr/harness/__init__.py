# Synthetic segmentation harness exports
from .dataset import SyntheticSample, generate_dataset, save_dataset, load_dataset
from .model import (
    AblationRow,
    AblationSpec,
    SegModel,
    SegModelConfig,
    init_model,
    forward,
    save_model,
    load_model,
)
from .train import (
    TrainConfig,
    TrainResult,
    MIoUReport,
    poly_lr,
    loss,
    train,
    evaluate_miou,
    write_trace,
)
from .ablation import AblationTable, AblationThresholds, run_ablation
