"""Diffusion-kurtosis model fitting, b-value channel restoration, and
protocol-mismatch evaluation for DWI lesion classification."""

__version__ = "0.1.0"

from .adapt import adapt_stack, restore_channel
from .core import DwiStack, LabeledCase, Protocol, subset_protocol
from .dki import FitConfig, ParameterMaps, fit_roi, fit_voxel, forward_signal
from .errors import DwiAdaptError
from .network import TrainConfig, make_splits, predict_case, train
from .phantom import PhantomConfig, generate_dataset
from .report import emit_report
from .scenario import ScenarioSpec, enumerate_scenarios, run_matrix, run_scenario
from .stats import auc, delong_test, holm_bonferroni

__all__ = [
    "DwiAdaptError",
    "DwiStack",
    "FitConfig",
    "LabeledCase",
    "ParameterMaps",
    "PhantomConfig",
    "Protocol",
    "ScenarioSpec",
    "TrainConfig",
    "adapt_stack",
    "auc",
    "delong_test",
    "emit_report",
    "enumerate_scenarios",
    "fit_roi",
    "fit_voxel",
    "forward_signal",
    "generate_dataset",
    "holm_bonferroni",
    "make_splits",
    "predict_case",
    "restore_channel",
    "run_matrix",
    "run_scenario",
    "subset_protocol",
    "train",
]
