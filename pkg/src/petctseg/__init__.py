"""Dual-modality PET/CT tumor segmentation on a numpy autodiff engine."""

from .tensor import Tensor, no_grad, set_debug_nan
from .layers import UNet, UNetSpec, build_unet
from .losses import LossKind, bce_loss, dice_loss
from .optim import Adam, AdamConfig
from .data import (Modality, PatientRecord, SplitManifest, WindowSpec,
                   generate_phantom_cohort, stratified_split)
from .metrics import (MetricSummary, PatientMetrics, aggregate, binarize,
                      confusion, evaluate_patient, format_table,
                      metrics_from_counts, write_patient_csv)
from .trainer import (ExperimentConfig, GridOutcome, GridSpec, TrialResult,
                      evaluate_patients, load_checkpoint, predict_volume,
                      run_grid, save_checkpoint, select_champions, train)
from .estimator import UNetSegmenter
from .errors import DataError, DivergenceError, NonFiniteError, NotFittedError

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamConfig",
    "DataError",
    "DivergenceError",
    "ExperimentConfig",
    "GridOutcome",
    "GridSpec",
    "LossKind",
    "MetricSummary",
    "Modality",
    "NonFiniteError",
    "NotFittedError",
    "PatientMetrics",
    "PatientRecord",
    "SplitManifest",
    "Tensor",
    "TrialResult",
    "UNet",
    "UNetSegmenter",
    "UNetSpec",
    "WindowSpec",
    "aggregate",
    "bce_loss",
    "binarize",
    "build_unet",
    "confusion",
    "dice_loss",
    "evaluate_patient",
    "evaluate_patients",
    "format_table",
    "generate_phantom_cohort",
    "load_checkpoint",
    "metrics_from_counts",
    "no_grad",
    "predict_volume",
    "run_grid",
    "save_checkpoint",
    "select_champions",
    "set_debug_nan",
    "stratified_split",
    "train",
    "write_patient_csv",
]
