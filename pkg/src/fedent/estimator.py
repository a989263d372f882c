"""scikit-learn style facade over the federated training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import LabeledDataset, PartitionSpec
from .engine import ALGORITHMS, TRAJECTORY_ALGORITHMS, AlgoParams, TrainingConfig, make_clients, precompute, run_experiment
from .meanfield import FixedPointConfig
from .models import Batch, ModelSpec
from .models import predict_proba as _predict_proba


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier by simulated federated learning.

    ``fit`` partitions the training data across ``n_clients`` simulated
    clients, precomputes the mean-field trajectory when the algorithm needs
    one, and runs ``rounds`` communication rounds.  Passing ``eval_set``
    records test accuracy per round in ``history_``; without it the
    training data doubles as the evaluation set.

    Parameters
    ----------
    algorithm : {"fedent", "fedavg", "fedadam", "fedprox", "feddyn", "fedcos", "fednorm"}
    hidden_dims : tuple of int
        Empty for softmax regression, otherwise ReLU MLP widths.
    n_clients, partition, alpha_d, shards_per_client
        Client partition settings.
    rounds, local_epochs, batch_size, base_lr, beta, gamma, sample_fraction
        Training-loop settings.
    mu, alpha, beta1, beta2, tau, server_lr
        Baseline-specific constants.
    eps, max_outer
        Fixed-point tolerance (both estimators) and iteration cap.
    random_state : int
    """

    def __init__(self, algorithm="fedent", hidden_dims=(), n_clients=10, partition="iid", alpha_d=None,
                 shards_per_client=None, rounds=20, local_epochs=1, batch_size=32, base_lr=0.01, beta=0.99,
                 gamma=0.99, sample_fraction=1.0, mu=0.01, alpha=0.001, beta1=0.9, beta2=0.99, tau=1e-3,
                 server_lr=0.01, eps=1e-3, max_outer=200, random_state=0):
        self.algorithm = algorithm
        self.hidden_dims = hidden_dims
        self.n_clients = n_clients
        self.partition = partition
        self.alpha_d = alpha_d
        self.shards_per_client = shards_per_client
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.beta = beta
        self.gamma = gamma
        self.sample_fraction = sample_fraction
        self.mu = mu
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.tau = tau
        self.server_lr = server_lr
        self.eps = eps
        self.max_outer = max_outer
        self.random_state = random_state

    def _config(self, n_features: int, n_classes: int) -> TrainingConfig:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        hidden = tuple(self.hidden_dims or ())
        return TrainingConfig(
            algorithm=self.algorithm,
            model=ModelSpec("mlp" if hidden else "softmax_regression", n_features, n_classes, hidden),
            partition=PartitionSpec(self.partition, self.n_clients, self.random_state,
                                    self.alpha_d, self.shards_per_client),
            T=self.rounds, E=self.local_epochs, batch_size=self.batch_size, base_lr=self.base_lr,
            beta=self.beta, gamma=self.gamma, sample_fraction=self.sample_fraction, seed=self.random_state,
            algo_params=AlgoParams(self.mu, self.alpha, self.beta1, self.beta2, self.tau, self.server_lr),
            fixed_point=FixedPointConfig(self.eps, self.eps, self.max_outer),
        )

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        n_classes = max(len(self.classes_), 2)
        train = LabeledDataset(Batch(X, codes), "train", n_classes)
        if eval_set is None:
            test = train
        else:
            Xe, ye = check_X_y(*eval_set, dtype=np.float64)
            test = LabeledDataset(Batch(Xe, self._encode(ye)), "eval", n_classes)
        config = self._config(X.shape[1], n_classes)
        clients = make_clients(train, config)
        self.partitions_ = [c.partition for c in clients]
        self.trajectory_ = precompute(config, train, clients) if config.algorithm in TRAJECTORY_ALGORITHMS else None
        self.history_ = run_experiment(config, train, test, self.trajectory_, clients=clients)
        self.model_spec_ = config.model
        self.params_ = self.history_.final_params
        return self

    def _encode(self, y) -> np.ndarray:
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("eval_set contains labels not seen in training")
        return idx

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        proba = _predict_proba(self.model_spec_, self.params_, X)
        return proba[:, :len(self.classes_)] if len(self.classes_) > 1 else proba[:, :1]

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
