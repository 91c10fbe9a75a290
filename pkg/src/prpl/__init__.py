"""Prototype-representation pairwise learning for cross-domain EEG
classification, in plain numpy."""
from .config import ABLATIONS, TrainConfig
from .data import (Dataset, RawRecording, SyntheticSpec, compute_de_features,
                   generate_cohort, generate_synthetic, inject_label_noise, lds_smooth,
                   load_dataset, save_dataset)
from .gradcheck import gradient_check
from .model import init_params, predict
from .protocols import ProtocolSpec, confusion_matrix, make_folds, run_noise_sweep, run_protocol
from .training import FitResult, fit

__all__ = [
    "ABLATIONS", "TrainConfig", "Dataset", "RawRecording", "SyntheticSpec",
    "compute_de_features", "generate_cohort", "generate_synthetic", "inject_label_noise",
    "lds_smooth", "load_dataset", "save_dataset", "gradient_check", "init_params", "predict",
    "ProtocolSpec", "confusion_matrix", "make_folds", "run_noise_sweep", "run_protocol",
    "FitResult", "fit",
]
