"""Semi-supervised deep embedded clustering for vibration-based fault diagnosis."""

from .config import TrainingConfig, desk_config, load_config, save_config
from .metrics import EvalReport, clustering_accuracy, evaluate, nmi
from .pipeline import ExperimentResult, TrialResult, run_semisupervised, run_sweep, run_unsupervised

__all__ = [
    "TrainingConfig", "desk_config", "load_config", "save_config",
    "EvalReport", "clustering_accuracy", "evaluate", "nmi",
    "ExperimentResult", "TrialResult", "run_semisupervised", "run_unsupervised", "run_sweep",
]
__version__ = "0.1.0"
