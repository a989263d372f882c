"""Entropy-adaptive federated learning lab."""
from .analysis import BoundReport, drift, drift_bound_G, estimate_pl_delta, kappa, loss_decrease_check, round_gap_bound
from .data import ClientPartition, LabeledDataset, PartitionSpec, load_idx, make_synthetic, partition
from .engine import RunHistory, TrainingConfig, aggregate, evaluate, precompute, run_experiment
from .estimator import FederatedClassifier
from .meanfield import (
    MeanFieldTrajectory,
    RateSolveConfig,
    decay_lr,
    entropy_shares,
    fixed_point,
    lr_upper_bound,
    solve_learning_rate,
    system_entropy,
)
from .models import ModelSpec, estimate_bounds, gradient, init_params, loss

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "ClientPartition", "FederatedClassifier", "LabeledDataset", "MeanFieldTrajectory",
    "ModelSpec", "PartitionSpec", "RateSolveConfig", "RunHistory", "TrainingConfig", "aggregate",
    "decay_lr", "drift", "drift_bound_G", "entropy_shares", "estimate_bounds", "estimate_pl_delta",
    "evaluate", "fixed_point", "gradient", "init_params", "kappa", "load_idx", "loss",
    "loss_decrease_check", "lr_upper_bound", "make_synthetic", "partition", "precompute",
    "round_gap_bound", "run_experiment", "solve_learning_rate", "system_entropy",
]
