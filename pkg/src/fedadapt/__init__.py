"""Deterministic federated-learning simulation with fine-grained discovery
of what a joining client brings (new domain vs. new classes) and
contribution-weighted adaptation that keeps source performance intact."""

__version__ = "0.1.0"

from .config import FederationConfig, ScenarioKind, config_from_dict, load_config
from .discovery import (DiffReport, KnowledgeVerdict, Thresholds, VerdictKind,
                        calibrate_thresholds, classify_knowledge, compute_diffs)
from .nn import SplitModel, new_model
from .orchestrator import (bootstrap_sources, run, run_ablation_afm,
                           run_adaptation, run_sequential)

__all__ = [
    "FederationConfig",
    "ScenarioKind",
    "config_from_dict",
    "load_config",
    "DiffReport",
    "KnowledgeVerdict",
    "Thresholds",
    "VerdictKind",
    "calibrate_thresholds",
    "classify_knowledge",
    "compute_diffs",
    "SplitModel",
    "new_model",
    "bootstrap_sources",
    "run",
    "run_ablation_afm",
    "run_adaptation",
    "run_sequential",
    "__version__",
]
