"""Learned decision losses for predict-then-optimize pipelines.

The main entry points are re-exported here; the ``egl-lab`` command wraps
the same functionality.
"""

from .core import (
    DecisionProblem, PtoInstance, decision_quality, dq_regret, mean_normalized_dq, normalized_dq,
)
from .datagen import Dataset, DatasetSpec, generate, load_dataset, make_problem, save_dataset
from .errors import (
    CapabilityError, ConfigError, DegenerateBaselineError, EglLabError, FittingError, InputError,
    SolverError, TrainingError,
)
from .harness import ExperimentConfig, ExperimentReport, load_config, run_experiment, run_trial
from .kernels import BACKEND as KERNEL_BACKEND
from .losses.families import FAMILIES, InstanceLosses, LossParams
from .problems import PortfolioProblem, SolverSettings, TopKProblem, WebAdvertisingProblem

__version__ = "0.1.0"

__all__ = [
    "CapabilityError", "ConfigError", "Dataset", "DatasetSpec", "DecisionProblem",
    "DegenerateBaselineError", "EglLabError", "ExperimentConfig", "ExperimentReport", "FAMILIES",
    "FittingError", "InputError", "InstanceLosses", "KERNEL_BACKEND", "LossParams",
    "PortfolioProblem", "PtoInstance", "SolverError", "SolverSettings", "TopKProblem",
    "TrainingError", "WebAdvertisingProblem", "decision_quality", "dq_regret", "generate",
    "load_config", "load_dataset", "make_problem", "mean_normalized_dq", "normalized_dq",
    "run_experiment", "run_trial", "save_dataset",
]
