"""Federated training loop shared by FedEnt and the baseline algorithms.

Every round samples clients, runs local SGD, aggregates, applies the server
update and evaluates.  Algorithms differ only in the local rate, the local
gradient correction, the aggregation weights and the server step.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .data import ClientPartition, LabeledDataset, PartitionSpec, partition
from .meanfield import (
    FixedPointConfig,
    MeanFieldTrajectory,
    _solve,
    decay_lr,
    entropy_shares,
    fednorm_rate,
    fixed_point,
    lr_upper_bound,
    system_entropy,
)
from .models import Batch, ModelSpec, gradient, init_params, loss, predict_proba
from .numerics import Stream, as_vector, dot, l2norm, rng_stream

ALGORITHMS = ("fedent", "fedavg", "fedadam", "fedprox", "feddyn", "fedcos", "fednorm")
TRAJECTORY_ALGORITHMS = ("fedent", "fednorm")
BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class AlgoParams:
    mu: float = 0.01
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    server_lr: float = 0.01


@dataclass(frozen=True)
class TrainingConfig:
    algorithm: str
    model: ModelSpec
    partition: PartitionSpec
    T: int
    E: int = 1
    batch_size: int = 32
    base_lr: float = 0.01
    beta: float = 0.99
    gamma: float = 0.99
    sample_fraction: float = 1.0
    seed: int = 0
    algo_params: AlgoParams = field(default_factory=AlgoParams)
    fixed_point: FixedPointConfig = field(default_factory=FixedPointConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if self.T < 1 or self.E < 1 or self.batch_size < 1:
            raise ValueError("T, E and batch_size must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.sample_fraction * self.partition.N < 1:
            raise ValueError("sample_fraction * N must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie strictly inside (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def clients_per_round(self) -> int:
        return math.ceil(self.sample_fraction * self.partition.N - 1e-12)

    def with_algorithm(self, algorithm: str) -> "TrainingConfig":
        return replace(self, algorithm=algorithm)


@dataclass
class ClientState:
    client_id: int
    partition: ClientPartition
    data: Batch
    local_params: np.ndarray | None = None
    eta_history: list[float] = field(default_factory=list)
    feddyn_h: np.ndarray | None = None

    @property
    def theta(self) -> float:
        return self.partition.theta


@dataclass
class ServerState:
    global_params: np.ndarray
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    round: int = 0


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    test_accuracy: float
    mean_eta: float
    entropy: float
    max_drift: float
    drift_bound: float
    eta_bound_violations: int
    wallclock_ms: float
    eta_clamps: int = 0

    def same_numbers(self, other: "RoundRecord") -> bool:
        """Equality ignoring wall-clock time, with NaN == NaN."""
        for f in fields(self):
            if f.name == "wallclock_ms":
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            if not (a == b or (isinstance(a, float) and math.isnan(a) and math.isnan(b))):
                return False
        return True


@dataclass
class RoundTrace:
    """Raw per-round quantities kept for post-hoc bound checks."""
    sampled: list[int]
    weights: np.ndarray
    etas: list[float]
    rate_grad_norms: list[float]
    locals: list[np.ndarray]
    global_before: np.ndarray
    global_after: np.ndarray


@dataclass
class RunHistory:
    algorithm: str
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    trace: list[RoundTrace] | None = None
    final_params: np.ndarray | None = None
    D_run: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else float("nan")

    def same_numbers(self, other: "RunHistory") -> bool:
        return (len(self) == len(other)
                and all(a.same_numbers(b) for a, b in zip(self.records, other.records))
                and np.array_equal(self.final_params, other.final_params))


# -- building blocks -----------------------------------------------------------

def aggregate(locals_: Sequence[np.ndarray], theta: Sequence[float]) -> np.ndarray:
    """Weighted sum ``sum_i theta_i w_i``; weights must sum to one.

    Accumulated as ``w_0 + sum_i theta_i (w_i - w_0)`` so that identical
    inputs come back bit-for-bit, whatever the rounding of ``theta``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if len(locals_) != theta.shape[0] or len(locals_) == 0:
        raise ValueError(f"{len(locals_)} parameter vectors but {theta.shape[0]} weights")
    if abs(theta.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {theta.sum():.12g}, expected 1")
    first = as_vector(locals_[0], "locals[0]")
    out = first.copy()
    for i in range(1, len(locals_)):
        w = as_vector(locals_[i], f"locals[{i}]")
        if w.shape != out.shape:
            raise ValueError(f"dimension mismatch: locals[{i}] has {w.shape[0]}, expected {out.shape[0]}")
        out += theta[i] * (w - first)
    return out


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    if batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_update(algo: str, client: ClientState, global_w, eta: float, E: int, batch_size: int,
                 rng: np.random.Generator, algo_params: AlgoParams, spec: ModelSpec,
                 context: str = "") -> np.ndarray:
    """Run ``E`` epochs of mini-batch SGD from ``global_w`` on one client.

    A batch covering the whole client dataset keeps the data in its stored
    order, so a single full-batch epoch is exactly one gradient step.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    global_w = as_vector(global_w, "global_w")
    X, y = client.data
    w = global_w.copy()
    h = client.feddyn_h
    for _ in range(E):
        for idx in _minibatches(len(y), batch_size, rng):
            g = gradient(spec, w, Batch(X[idx], y[idx]))
            if algo == "fedprox":
                g = g + algo_params.mu * (w - global_w)
            elif algo == "feddyn":
                if h is not None:
                    g = g - h
                g = g + algo_params.alpha * (w - global_w)
            w = w - eta * g
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"non-finite local parameters ({context}client {client.client_id})")
    return w


def server_update(algo: str, server: ServerState, aggregated, algo_params: AlgoParams) -> ServerState:
    aggregated = as_vector(aggregated, "aggregated")
    w = server.global_params
    if aggregated.shape != w.shape:
        raise ValueError(f"dimension mismatch: aggregated has {aggregated.shape[0]}, global has {w.shape[0]}")
    if algo != "fedadam":
        return ServerState(aggregated.copy(), server.adam_m, server.adam_v, server.round + 1)
    p = algo_params
    delta = aggregated - w
    m = np.zeros_like(w) if server.adam_m is None else server.adam_m
    v = np.zeros_like(w) if server.adam_v is None else server.adam_v
    m = p.beta1 * m + (1.0 - p.beta1) * delta
    v = p.beta2 * v + (1.0 - p.beta2) * delta * delta
    new_w = w + p.server_lr * m / (np.sqrt(v) + p.tau)
    return ServerState(new_w, m, v, server.round + 1)


def fedcos_weights(locals_: Sequence[np.ndarray], global_w, theta: Sequence[float]) -> np.ndarray:
    """Cosine similarity to the global model, floored at 0, times ``theta``, renormalised."""
    theta = np.asarray(theta, dtype=np.float64)
    gnorm = l2norm(global_w)
    cos = np.zeros(len(locals_))
    for i, w in enumerate(locals_):
        wn = l2norm(w)
        if wn > 0 and gnorm > 0:
            cos[i] = max(dot(w, global_w) / (wn * gnorm), 0.0)
    raw = cos * theta
    total = raw.sum()
    if total <= 0:
        return theta / theta.sum()
    return raw / total


def evaluate(spec: ModelSpec, params, test: Batch) -> dict[str, float]:
    X, y = test
    if len(y) == 0:
        raise ValueError("test set is empty")
    pred = np.argmax(predict_proba(spec, params, X), axis=1)
    return {"accuracy": float(np.mean(pred == y)), "loss": loss(spec, params, test)}


# -- orchestration ---------------------------------------------------------------

def initial_params(config: TrainingConfig) -> np.ndarray:
    return init_params(config.model, rng_stream(config.seed, Stream.INIT))


def make_clients(train: LabeledDataset, config: TrainingConfig) -> list[ClientState]:
    parts = partition(train, config.partition)
    return [ClientState(p.client_id, p, Batch(train.X[p.indices], train.y[p.indices])) for p in parts]


def precompute(config: TrainingConfig, train: LabeledDataset, clients: list[ClientState] | None = None
               ) -> MeanFieldTrajectory:
    """Mean-field trajectory for ``config`` over the full client population."""
    if config.algorithm not in TRAJECTORY_ALGORITHMS:
        raise ValueError(f"{config.algorithm} does not use a mean-field trajectory")
    clients = clients or make_clients(train, config)
    fp = config.fixed_point
    return fixed_point(
        [c.data for c in clients], [c.theta for c in clients], config.model, initial_params(config),
        config.T, fp.rate_config(config.beta), fp.eps1, fp.eps2, fp.max_outer,
        batch_size=config.batch_size, seed=config.seed, rate=config.algorithm,
    )


def _rate_batch(client: ClientState, batch_size: int, rng: np.random.Generator) -> Batch:
    X, y = client.data
    if batch_size >= len(y):
        return client.data
    idx = np.sort(rng.choice(len(y), batch_size, replace=False))
    return Batch(X[idx], y[idx])


def _check_trajectory(config: TrainingConfig, trajectory, w0: np.ndarray) -> None:
    needs = config.algorithm in TRAJECTORY_ALGORITHMS
    if needs and trajectory is None:
        raise ValueError(f"{config.algorithm} needs a mean-field trajectory")
    if not needs:
        if trajectory is not None:
            raise ValueError(f"{config.algorithm} does not take a trajectory")
        return
    if trajectory.d != w0.shape[0]:
        raise ValueError(f"trajectory has d={trajectory.d}, model has {w0.shape[0]} parameters")
    if trajectory.N != config.partition.N:
        raise ValueError(f"trajectory has N={trajectory.N}, config has N={config.partition.N}")
    if trajectory.T < config.T:
        raise ValueError(f"trajectory covers T={trajectory.T} rounds, config asks for {config.T}")
    if not np.array_equal(trajectory.phi1[0], w0):
        raise ValueError("trajectory phi1(0) does not match the initial parameters of this seed")


def run_experiment(config: TrainingConfig, train: LabeledDataset, test: LabeledDataset,
                   trajectory: MeanFieldTrajectory | None = None, record_trace: bool = False,
                   clients: list[ClientState] | None = None) -> RunHistory:
    """Train for ``config.T`` rounds and return the per-round history.

    FedEnt clients solve their rate from a fresh mini-batch gradient at the
    current global model against the trajectory's ``phi1(t)`` and
    ``phi2(t+1)``, blend it with their previous rate, and clip the result to
    the rate bound evaluated with that gradient's norm.
    """
    spec = config.model
    algo = config.algorithm
    w0 = initial_params(config)
    _check_trajectory(config, trajectory, w0)
    clients = clients or make_clients(train, config)
    N = len(clients)
    theta = np.array([c.theta for c in clients])
    rate_cfg = config.fixed_point.rate_config(config.beta)
    params = config.algo_params
    server = ServerState(w0.copy())
    prev_eta = np.full(N, config.base_lr)
    history = RunHistory(algo, config.seed, trace=[] if record_trace else None)
    pending = []   # (record, per-client bound inputs) finalised once D_run is known
    train_batch = train.examples
    test_batch = test.examples

    for r in range(config.T):
        started = time.perf_counter()
        w = server.global_params
        sampled = np.sort(rng_stream(config.seed, Stream.SAMPLING, r)
                          .choice(N, config.clients_per_round, replace=False))
        weights = theta[sampled] / theta[sampled].sum()
        etas, gnorms, locals_ = [], [], []
        clamps = 0
        for i in sampled:
            client = clients[i]
            if algo in TRAJECTORY_ALGORITHMS:
                g = gradient(spec, w, _rate_batch(client, config.batch_size,
                                                  rng_stream(config.seed, Stream.RATE_BATCH, i, r)))
                gn = l2norm(g)
                phi1_t = trajectory.phi1[r]
                if algo == "fedent":
                    fresh, _ = _solve(theta[i], g, phi1_t, trajectory.phi2[r + 1], rate_cfg, eta_init=prev_eta[i])
                    eta = decay_lr(prev_eta[i], fresh, config.gamma)
                    cap = lr_upper_bound(theta[i], config.beta, gn, l2norm(phi1_t), trajectory.phi2[r + 1])
                    if eta > cap:
                        eta = cap
                        clamps += 1
                else:
                    fresh = fednorm_rate(theta[i], g, phi1_t, trajectory.phi1[r + 1], config.beta)
                    eta = decay_lr(prev_eta[i], fresh, config.gamma)
                prev_eta[i] = eta
                gnorms.append(gn)
            else:
                eta = config.base_lr
            etas.append(eta)
            client.eta_history.append(eta)
            w_i = local_update(algo, client, w, eta, config.E, config.batch_size,
                               rng_stream(config.seed, Stream.LOCAL, i, r), params, spec,
                               context=f"round {r}, ")
            client.local_params = w_i
            locals_.append(w_i)

        agg_weights = fedcos_weights(locals_, w, weights) if algo == "fedcos" else weights
        server = server_update(algo, server, aggregate(locals_, agg_weights), params)
        if algo == "feddyn":
            for i, w_i in zip(sampled, locals_):
                h = clients[i].feddyn_h
                clients[i].feddyn_h = (np.zeros_like(w) if h is None else h) - params.alpha * (w_i - w)
        new_w = server.global_params
        if not np.all(np.isfinite(new_w)):
            raise FloatingPointError(f"non-finite global parameters after round {r}")

        ev = evaluate(spec, new_w, test_batch)
        drifts = [l2norm(new_w - w_i) for w_i in locals_]
        record = RoundRecord(
            round=r + 1,
            train_loss=loss(spec, new_w, train_batch),
            test_accuracy=ev["accuracy"],
            mean_eta=math.fsum(etas) / len(etas),
            entropy=system_entropy(entropy_shares(locals_, agg_weights)),
            max_drift=max(drifts),
            drift_bound=float("nan"),
            eta_bound_violations=0,
            wallclock_ms=(time.perf_counter() - started) * 1e3,
            eta_clamps=clamps,
        )
        history.records.append(record)
        pending.append((record, sampled, agg_weights, etas))
        if record_trace:
            history.trace.append(RoundTrace(list(map(int, sampled)), agg_weights, etas, gnorms,
                                            locals_, w.copy(), new_w.copy()))
        history.D_run = max([history.D_run, *gnorms])

    if algo in TRAJECTORY_ALGORITHMS:
        D = history.D_run
        for r, (record, sampled, agg_weights, etas) in enumerate(pending):
            norm_t = l2norm(trajectory.phi1[r])
            phi2_next = trajectory.phi2[r + 1]
            record.drift_bound = sum(
                2 * config.beta * th * th * D * D * norm_t / ((1 - config.beta) * phi2_next) for th in agg_weights)
            record.eta_bound_violations = int(sum(
                eta > lr_upper_bound(theta[i], config.beta, D, norm_t, phi2_next) + BOUND_SLACK
                for i, eta in zip(sampled, etas)))
    history.final_params = server.global_params.copy()
    return history
