"""Local loss functions with hand-written backpropagation.

Two model families are supported: multinomial softmax regression and a
ReLU multilayer perceptron.  Parameters live in one flat vector laid out
layer by layer as ``W`` (``fan_in x fan_out``, row-major) followed by ``b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .numerics import as_vector, l2norm

LOG_PROB_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("softmax_regression", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind == "softmax_regression" and self.hidden_dims:
            raise ValueError("softmax_regression takes no hidden layers")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ValueError("mlp needs at least one hidden layer")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden layer widths must be positive")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


@dataclass
class SmoothnessEstimate:
    D_hat: float
    L_hat: float
    trials: int
    skipped: int = 0
    history: list[tuple[float, float]] = field(default_factory=list, repr=False)


def _check_batch(spec: ModelSpec, batch) -> Batch:
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (n, {spec.input_dim}), got {X.shape}")
    if y.shape != (X.shape[0],):
        raise ValueError("inputs and labels must have equal length")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return Batch(X, y.astype(np.intp, copy=False))


def unpack(spec: ModelSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into per-layer ``(W, b)`` views."""
    params = as_vector(params, "params")
    if params.shape[0] != spec.n_params:
        raise ValueError(f"dimension mismatch: params has {params.shape[0]} entries, model needs {spec.n_params}")
    layers = []
    offset = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _finite_or_raise(a: np.ndarray, layer: int) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite activation in layer {layer}")


def _forward(spec: ModelSpec, params, X: np.ndarray):
    layers = unpack(spec, params)
    acts = [X]
    h = X
    for k, (W, b) in enumerate(layers):
        with np.errstate(all="ignore"):
            z = h @ W + b
        _finite_or_raise(z, k)
        if k < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return layers, acts, h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_proba(spec: ModelSpec, params, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _, _, logits = _forward(spec, params, X)
    return np.exp(log_softmax(logits))


def _per_sample(logp: np.ndarray, y: np.ndarray) -> np.ndarray:
    picked = logp[np.arange(y.shape[0]), y]
    return -np.maximum(picked, LOG_PROB_FLOOR)


def loss(spec: ModelSpec, params, batch) -> float:
    """Mean cross-entropy over the batch.

    Per-example losses are sorted before summation, which makes the value
    independent of the order of examples in the batch.
    """
    X, y = _check_batch(spec, batch)
    _, _, logits = _forward(spec, params, X)
    per = _per_sample(log_softmax(logits), y)
    return float(np.sort(per).sum() / y.shape[0])


def loss_and_gradient(spec: ModelSpec, params, batch) -> tuple[float, np.ndarray]:
    X, y = _check_batch(spec, batch)
    n = y.shape[0]
    layers, acts, logits = _forward(spec, params, X)
    logp = log_softmax(logits)
    per = _per_sample(logp, y)

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    # the probability floor is flat, so floored examples contribute no gradient
    floored = logp[np.arange(n), y] < LOG_PROB_FLOOR
    if floored.any():
        delta[floored] = 0.0
    delta /= n

    grads: list[np.ndarray] = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gW = acts[k].T @ delta
        gb = delta.sum(axis=0)
        grads.append(gb)
        grads.append(gW.ravel())
        if k > 0:
            delta = (delta @ W.T) * (acts[k] > 0)
            _finite_or_raise(delta, k)
    grad = np.concatenate(grads[::-1])
    _finite_or_raise(grad, 0)
    return float(np.sort(per).sum() / n), grad


def gradient(spec: ModelSpec, params, batch) -> np.ndarray:
    return loss_and_gradient(spec, params, batch)[1]


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    u = rng.standard_normal(d)
    norm = l2norm(u)
    return u / norm if norm > 0 else u


def estimate_bounds(
    spec: ModelSpec,
    dataset,
    trials: int,
    radius: float,
    rng: np.random.Generator,
    anchors: Sequence[np.ndarray] | None = None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> SmoothnessEstimate:
    """Probe the gradient-norm bound D and the gradient Lipschitz constant L.

    Probes are taken near ``anchors`` (parameters visited by an optimizer).
    The first ``len(anchors)`` probes sit exactly on the anchors; later ones
    are jittered inside a ball of ``radius``.  Each probe ``w`` is paired with
    ``w + radius * u`` for a random unit ``u`` to measure the gradient
    difference ratio.  Both estimates are running maxima, so extending the
    number of trials for a fixed stream never lowers them.

    ``grad_fn`` replaces the model gradient, e.g. with an analytic test loss.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if grad_fn is None:
        batch = _check_batch(spec, dataset)

        def grad_fn(w):
            return gradient(spec, w, batch)

    if anchors is None or len(anchors) == 0:
        anchors = [np.zeros(spec.n_params)]
    anchors = [as_vector(a, "anchor") for a in anchors]
    d = anchors[0].shape[0]

    D_hat = 0.0
    L_hat = 0.0
    skipped = 0
    history = []
    for k in range(trials):
        anchor = anchors[k % len(anchors)]
        jitter = _unit(rng, d) * radius * rng.uniform()
        direction = _unit(rng, d)
        w = anchor if k < len(anchors) else anchor + jitter
        w2 = w + radius * direction
        g = grad_fn(w)
        D_hat = max(D_hat, l2norm(g))
        step = l2norm(w2 - w)
        if step == 0.0:
            skipped += 1
        else:
            L_hat = max(L_hat, l2norm(grad_fn(w2) - g) / step)
        history.append((D_hat, L_hat))
    if skipped == trials:
        raise ValueError("every probe pair was degenerate (w == w')")
    return SmoothnessEstimate(D_hat, L_hat, trials, skipped, history)
