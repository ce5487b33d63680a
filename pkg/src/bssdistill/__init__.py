"""Knowledge distillation with boundary supporting samples, on a small numpy autodiff engine."""

from .attack import AttackConfig, AttackResult, AttackStatus, find_bss, find_bss_batch, taylor_residual
from .distill import DistillConfig, train
from .experiments import ExperimentConfig, ExperimentResult, replay, run_experiment
from .metrics import SimilarityReport, angsim, compare_classifiers, magsim
from .models import ClassifierModel, ClassifierSpec, init, load, save

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackStatus",
    "ClassifierModel",
    "ClassifierSpec",
    "DistillConfig",
    "ExperimentConfig",
    "ExperimentResult",
    "SimilarityReport",
    "angsim",
    "compare_classifiers",
    "find_bss",
    "find_bss_batch",
    "init",
    "load",
    "magsim",
    "replay",
    "run_experiment",
    "save",
    "taylor_residual",
    "train",
]
