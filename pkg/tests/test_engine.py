import math
from dataclasses import replace

import numpy as np
import pytest

from fedent.data import PartitionSpec, make_synthetic, train_test_split
from fedent.engine import (
    AlgoParams,
    ClientState,
    ServerState,
    TrainingConfig,
    aggregate,
    evaluate,
    fedcos_weights,
    initial_params,
    local_update,
    make_clients,
    precompute,
    run_experiment,
    server_update,
)
from fedent.meanfield import lr_upper_bound
from fedent.models import Batch, ModelSpec, gradient
from fedent.numerics import l2norm


def naive_aggregate(locals_, theta):
    out = [0.0] * len(locals_[0])
    for t, w in zip(theta, locals_):
        for k in range(len(w)):
            out[k] += t * w[k]
    return np.array(out)


def test_aggregate_examples():
    np.testing.assert_array_equal(aggregate([np.array([1.0]), np.array([3.0])], [0.5, 0.5]), [2.0])
    w = np.array([0.1, 0.7, -3.0])
    np.testing.assert_array_equal(aggregate([w, w, w], [0.2, 0.3, 0.5]), w)
    rng = np.random.default_rng(0)
    locs = list(rng.standard_normal((5, 20)))
    theta = rng.dirichlet(np.ones(5))
    np.testing.assert_allclose(aggregate(locs, theta), naive_aggregate(locs, theta), rtol=0, atol=1e-12)


def test_aggregate_errors():
    with pytest.raises(ValueError, match="dimension mismatch"):
        aggregate([np.ones(2), np.ones(3)], [0.5, 0.5])
    with pytest.raises(ValueError, match="sum to"):
        aggregate([np.ones(2), np.ones(2)], [0.5, 0.6])


def toy_client(n=6, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((n, dim)), rng.integers(0, 2, n)
    return ClientState(0, None, Batch(X, y))


def test_local_update_reductions():
    spec = ModelSpec("softmax_regression", 2, 2)
    c = toy_client()
    w = np.array([0.3, -0.2, 0.1, 0.4, 0.0, 0.05])
    p = AlgoParams()
    rng = lambda: np.random.default_rng(1)
    np.testing.assert_array_equal(local_update("fedavg", c, w, 0.0, 3, 2, rng(), p, spec), w)
    one_step = local_update("fedavg", c, w, 0.1, 1, 100, rng(), p, spec)
    np.testing.assert_array_equal(one_step, w - 0.1 * gradient(spec, w, c.data))
    avg = local_update("fedavg", c, w, 0.1, 2, 2, rng(), p, spec)
    np.testing.assert_array_equal(local_update("fedprox", c, w, 0.1, 2, 2, rng(), replace(p, mu=0.0), spec), avg)
    np.testing.assert_array_equal(local_update("feddyn", c, w, 0.1, 2, 2, rng(), replace(p, alpha=0.0), spec), avg)
    assert not np.array_equal(local_update("fedprox", c, w, 0.1, 2, 2, rng(), p, spec), avg)
    with pytest.raises(ValueError):
        local_update("fedavg", c, w, -1.0, 1, 1, rng(), p, spec)


def test_local_update_hand_step_on_d2_toy():
    # single example, softmax over two classes with zero weights: p = (0.5, 0.5)
    spec = ModelSpec("softmax_regression", 0 + 1, 2)
    c = ClientState(0, None, Batch(np.array([[2.0]]), np.array([1])))
    w = np.zeros(spec.n_params)  # [W00, W01, b0, b1]
    out = local_update("fedavg", c, w, 0.5, 1, 1, np.random.default_rng(0), AlgoParams(), spec)
    # dL/dz = p - onehot = (0.5, -0.5); dW = x * dz, db = dz
    np.testing.assert_array_equal(out, -0.5 * np.array([1.0, -1.0, 0.5, -0.5]))


def test_server_update_rules():
    p = AlgoParams()
    s = ServerState(np.array([1.0, 2.0]))
    agg = np.array([0.5, 0.5])
    np.testing.assert_array_equal(server_update("fedavg", s, agg, p).global_params, agg)
    same = server_update("fedadam", s, s.global_params, p)
    np.testing.assert_array_equal(same.global_params, s.global_params)
    assert same.round == 1
    d1 = server_update("fedadam", ServerState(np.array([0.0])), np.array([0.1]), p)
    m, v = 0.1 * 0.1, 0.01 * 0.01
    assert d1.global_params[0] == pytest.approx(0.01 * m / (math.sqrt(v) + 1e-3), abs=1e-12)
    assert np.all(d1.adam_v >= 0)
    with pytest.raises(ValueError):
        server_update("fedavg", s, np.ones(3), p)


def test_fedcos_weights_examples():
    g = np.array([1.0, 0.0])
    theta = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(fedcos_weights([g, g, g], g, theta), theta, atol=1e-15)
    locs = [g, np.array([0.5, math.sqrt(3) / 2]), np.array([0.0, 1.0])]
    raw = theta * np.array([1.0, 0.5, 0.0])
    np.testing.assert_allclose(fedcos_weights(locs, g, theta), raw / raw.sum(), atol=1e-12)
    np.testing.assert_allclose(fedcos_weights([-g, -g, np.zeros(2)], g, theta), theta)


def test_evaluate():
    spec = ModelSpec("softmax_regression", 2, 2)
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 3.0]])
    y = np.array([0, 1, 0, 1])
    res = evaluate(spec, np.zeros(6), Batch(X, y))
    assert res["accuracy"] == 0.5 and res["loss"] == pytest.approx(math.log(2))
    w = np.array([5.0, -5.0, -5.0, 5.0, 0.0, 0.0])
    assert evaluate(spec, w, Batch(X, y))["accuracy"] == 1.0
    rng = np.random.default_rng(0)
    w, Xr, yr = rng.standard_normal(6), rng.standard_normal((50, 2)), rng.integers(0, 2, 50)
    correct = 0
    for x, label in zip(Xr, yr):
        z = x @ w[:4].reshape(2, 2) + w[4:]
        correct += int(int(np.argmax(z)) == label)
    assert evaluate(spec, w, Batch(Xr, yr))["accuracy"] == correct / 50


@pytest.fixture(scope="module")
def task():
    full = make_synthetic(2, 150, 10, 3.0, np.random.default_rng(0))
    return train_test_split(full, 200, 100, np.random.default_rng(1))


def config(algorithm="fedavg", **kw):
    base = dict(algorithm=algorithm, model=ModelSpec("softmax_regression", 10, 2),
                partition=PartitionSpec("dirichlet", 5, 0, alpha_d=1.0), T=6, E=2, batch_size=8, seed=3)
    base.update(kw)
    return TrainingConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        config("fedsgd")
    with pytest.raises(ValueError):
        config(sample_fraction=0.1)
    with pytest.raises(ValueError):
        config(T=0)
    assert config(sample_fraction=0.5).clients_per_round == 3


@pytest.mark.parametrize("algo", ["fedavg", "fedadam", "fedprox", "feddyn", "fedcos", "fednorm", "fedent"])
def test_runs_are_deterministic(task, algo):
    train, test = task
    cfg = config(algo, sample_fraction=0.6)
    traj = precompute(cfg, train) if algo in ("fedent", "fednorm") else None
    a = run_experiment(cfg, train, test, traj)
    b = run_experiment(cfg, train, test, traj)
    assert len(a) == cfg.T and [r.round for r in a.records] == list(range(1, cfg.T + 1))
    assert a.same_numbers(b)
    for r in a.records:
        assert -math.log(3) - 1e-12 <= r.entropy <= 0.0


def test_fedavg_full_batch_round_is_weighted_gradient_step(task):
    train, test = task
    cfg = config(E=1, batch_size=10_000, T=3, base_lr=0.05)
    h = run_experiment(cfg, train, test, record_trace=True)
    clients = make_clients(train, cfg)
    for tr in h.trace:
        assert abs(tr.weights.sum() - 1.0) <= 1e-12
        step = sum(c.theta * gradient(cfg.model, tr.global_before, c.data) for c in clients)
        np.testing.assert_allclose(tr.global_after, tr.global_before - 0.05 * step, rtol=0, atol=1e-12)


def test_baseline_reductions_are_bit_identical(task):
    train, test = task
    ref = run_experiment(config(), train, test)
    prox = run_experiment(config("fedprox", algo_params=AlgoParams(mu=0.0)), train, test)
    dyn = run_experiment(config("feddyn", algo_params=AlgoParams(alpha=0.0)), train, test)
    np.testing.assert_array_equal(prox.final_params, ref.final_params)
    np.testing.assert_array_equal(dyn.final_params, ref.final_params)
    assert prox.same_numbers(ref) and dyn.same_numbers(ref)


def test_fedent_rates_respect_bound_and_tiny_beta_freezes(task):
    train, test = task
    cfg = config("fedent", E=1, batch_size=10_000)
    traj = precompute(cfg, train)
    h = run_experiment(cfg, train, test, traj, record_trace=True)
    assert h.column("eta_bound_violations").sum() == 0
    for r, tr in enumerate(h.trace):
        for i, eta, gn in zip(tr.sampled, tr.etas, tr.rate_grad_norms):
            theta_i = 1.0 * len(make_clients(train, cfg)[i].partition.indices) / len(train)
            assert eta <= lr_upper_bound(theta_i, cfg.beta, gn, l2norm(traj.phi1[r]), traj.phi2[r + 1]) + 1e-12

    flat = config("fedent", beta=1e-12, base_lr=0.0)
    h = run_experiment(flat, train, test, precompute(flat, train), record_trace=True)
    assert max(h.column("mean_eta")) <= 1e-6
    assert max(l2norm(t.global_after - t.global_before) for t in h.trace) <= 1e-6
    assert len(set(h.column("test_accuracy"))) == 1


def test_trajectory_checks(task):
    train, test = task
    cfg = config("fedent")
    with pytest.raises(ValueError, match="needs a mean-field trajectory"):
        run_experiment(cfg, train, test)
    traj = precompute(cfg, train)
    with pytest.raises(ValueError, match="does not take"):
        run_experiment(config(), train, test, traj)
    with pytest.raises(ValueError, match="initial parameters"):
        run_experiment(replace(cfg, seed=4, partition=replace(cfg.partition, seed=0)), train, test, traj)
    with pytest.raises(ValueError, match="covers T="):
        run_experiment(replace(cfg, T=cfg.T + 1), train, test, traj)


def test_feddyn_state_update(task):
    train, test = task
    cfg = config("feddyn", T=1)
    clients = make_clients(train, cfg)
    run_experiment(cfg, train, test, clients=clients)
    w0 = initial_params(cfg)
    for c in clients:
        np.testing.assert_allclose(c.feddyn_h, -cfg.algo_params.alpha * (c.local_params - w0), atol=1e-15)
        assert len(c.eta_history) == 1
