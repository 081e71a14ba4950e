"""Benchmark of unsupervised domain adaptation for time-series classification."""

from .algorithms import UDAModel, default_hparams, predict, train
from .datamodel import (ALGORITHMS, TUNERS, DomainDataset, EvaluationRecord, HyperParams,
                        OracleAccessError, Scenario, ScoreMatrix, TimeSeriesBatch, TrialRecord)
from .datasets import (SplitPolicy, SyntheticSpec, generate_synthetic_scenario, load_domain,
                       preprocess_scenario)
from .pipeline import ExperimentConfig, analyze, report, run
from .selection import make_criterion, select_checkpoint, tune

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "TUNERS", "DomainDataset", "EvaluationRecord", "ExperimentConfig",
    "HyperParams", "OracleAccessError", "Scenario", "ScoreMatrix", "SplitPolicy",
    "SyntheticSpec", "TimeSeriesBatch", "TrialRecord", "UDAModel", "analyze",
    "default_hparams", "generate_synthetic_scenario", "load_domain", "make_criterion",
    "predict", "preprocess_scenario", "report", "run", "select_checkpoint", "train", "tune",
]
