"""Entropy-driven adaptive learning rates and their mean-field precomputation.

Each client's rate comes from a Hamiltonian stationarity condition that
couples it to two population aggregates: the weighted mean of all local
parameters (``phi1``) and their weighted squared-norm mass (``phi2``).
Clients cannot observe those aggregates during local training, so they are
replaced by estimator trajectories found offline as the fixed point of the
single-step mean-field dynamics.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .models import Batch, ModelSpec, gradient
from .numerics import Stream, as_vector, check_finite, dot, l2norm, rng_stream

PHI2_FLOOR = 1e-30
MFT_MAGIC = b"MFT1"


class RateSolveWarning(RuntimeWarning):
    pass


class DegenerateMassWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class RateSolveConfig:
    beta: float
    inner_tol: float = 1e-8
    inner_max_iters: int = 100
    damping: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie strictly inside (0, 1), got {self.beta}")
        if self.inner_tol <= 0 or self.inner_max_iters < 1:
            raise ValueError("inner_tol and inner_max_iters must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


# -- entropy -----------------------------------------------------------------

def entropy_shares(local_params: Sequence[np.ndarray], theta: Sequence[float],
                   phi2: float | None = None) -> np.ndarray:
    """Weighted squared-norm shares ``theta_i |w_i|^2 / mass``, clamped to [0, 1].

    ``mass`` is ``sum_j theta_j |w_j|^2`` unless an estimate ``phi2`` is given.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if len(local_params) != theta.shape[0]:
        raise ValueError(f"{len(local_params)} parameter vectors but {theta.shape[0]} weights")
    weighted = np.array([t * dot(w, w) for t, w in zip(theta, local_params)])
    mass = float(weighted.sum()) if phi2 is None else float(phi2)
    if mass < PHI2_FLOOR:
        raise ValueError("degenerate parameter mass: the weighted squared norms sum to ~0")
    return np.clip(weighted / mass, 0.0, 1.0)


def system_entropy(shares) -> float:
    """``sum_i p_i ln p_i`` with ``0 ln 0 = 0``; lies in ``[-ln N, 0]``."""
    p = np.asarray(shares, dtype=np.float64)
    nz = p[p > 0]
    return float(np.sum(nz * np.log(nz)))


# -- closed-form rate ---------------------------------------------------------

def lr_upper_bound(theta_i: float, beta: float, D: float, phi1_norm: float, phi2_next: float) -> float:
    """``2 beta theta_i D |phi1(t)| / ((1 - beta) phi2(t+1))``."""
    if phi2_next <= 0:
        raise ValueError("phi2_next must be positive")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return 2.0 * beta * theta_i * D * phi1_norm / ((1.0 - beta) * phi2_next)


def _clipped_linear_root(a: float, b: float, bound: float) -> float:
    """Root of ``eta = clip(a - b * eta, 0, bound)`` on ``[0, bound]``.

    With ``1 + b > 0`` the root is unique.  Otherwise the map crosses the
    identity more than once; the branch matching the closed-form rate
    ``a / (1 + b)`` is preferred, then the upper clip.
    """
    denom = 1.0 + b
    if denom > 0.0:
        return min(max(a / denom, 0.0), bound)
    if a > 0.0:
        return bound
    if a < 0.0 and denom < 0.0:
        eta = a / denom
        return eta if eta <= bound else 0.0
    return 0.0


@dataclass
class _RateProblem:
    theta_i: float
    beta: float
    s: float        # phi1 . g
    gg: float       # |g|^2
    pp: float       # |phi1|^2
    phi2_next: float
    bound: float

    @property
    def c(self) -> float:
        return self.beta * self.theta_i / ((1.0 - self.beta) * self.phi2_next)

    def share(self, eta: float) -> float:
        sq = max(self.pp - 2.0 * eta * self.s + eta * eta * self.gg, 0.0)
        return min(max(self.theta_i * sq / self.phi2_next, 0.0), 1.0)

    def log_term(self, eta: float) -> float:
        p = self.share(eta)
        return 1.0 + math.log(p) if p > 0.0 else -math.inf

    def step(self, eta: float) -> float:
        ell = self.log_term(eta)
        if not math.isfinite(ell):
            return 0.0
        k = self.c * ell
        return _clipped_linear_root(k * self.s, k * self.gg, self.bound)

    def residual(self, eta: float) -> float:
        ell = self.log_term(eta)
        if not math.isfinite(ell):
            return eta
        rhs = self.c * (self.s - eta * self.gg) * ell
        return eta - min(max(rhs, 0.0), self.bound)


def _solve(theta_i, grad, phi1_t, phi2_next, cfg: RateSolveConfig, eta_init=0.0, D=None):
    grad = as_vector(grad, "grad")
    phi1_t = as_vector(phi1_t, "phi1_t")
    if grad.shape != phi1_t.shape:
        raise ValueError(f"dimension mismatch: grad has {grad.shape[0]}, phi1_t has {phi1_t.shape[0]}")
    if phi2_next <= 0:
        raise ValueError("phi2_next must be positive")
    gnorm = l2norm(grad)
    if gnorm == 0.0:
        return 0.0, True
    D = gnorm if D is None else max(float(D), gnorm)
    bound = lr_upper_bound(theta_i, cfg.beta, D, l2norm(phi1_t), phi2_next)
    if bound == 0.0:
        return 0.0, True
    prob = _RateProblem(theta_i, cfg.beta, dot(phi1_t, grad), gnorm * gnorm,
                        dot(phi1_t, phi1_t), phi2_next, bound)
    eta = min(max(float(eta_init), 0.0), bound)
    for _ in range(cfg.inner_max_iters):
        nxt = (1.0 - cfg.damping) * eta + cfg.damping * prob.step(eta)
        if abs(nxt - eta) < cfg.inner_tol:
            return nxt, True
        eta = nxt
    # oscillating share: bracket a root of the residual instead.  r(0) <= 0 <= r(bound)
    # always holds, so a zero or a sign change exists on the grid.
    grid = np.linspace(0.0, bound, 257)
    res = np.array([prob.residual(x) for x in grid])
    zero = np.flatnonzero(res == 0.0)
    if zero.size:
        return float(grid[zero[0]]), False
    k = int(np.flatnonzero(np.sign(res[:-1]) != np.sign(res[1:]))[0])
    return float(brentq(prob.residual, grid[k], grid[k + 1], xtol=cfg.inner_tol)), False


def solve_learning_rate(theta_i: float, grad, phi1_t, phi2_next: float, cfg: RateSolveConfig,
                        eta_init: float = 0.0, D: float | None = None) -> float:
    """Solve the implicit entropy-optimal rate for one client and one round.

    The rate satisfies ``eta = c (phi1 - eta g)^T g (1 + ln p(eta))`` where
    ``c = beta theta_i / ((1 - beta) phi2_next)`` and
    ``p(eta) = theta_i |phi1 - eta g|^2 / phi2_next`` is the client's entropy
    share after the step.  The share is frozen inside each iteration, which
    makes the equation linear in ``eta``; the damped outer loop then
    re-evaluates the share.  The result is clipped to
    ``[0, lr_upper_bound(theta_i, beta, D, |phi1|, phi2_next)]`` with ``D``
    defaulting to ``|g|``.

    Parameters
    ----------
    theta_i : float
        Aggregation weight of the client.
    grad : array
        Local gradient at ``phi1_t``.
    phi1_t : array
        Mean-field estimate of the global parameters at this round.
    phi2_next : float
        Estimate of the weighted squared-norm mass at the next round.
    cfg : RateSolveConfig
    eta_init : float
        Starting iterate, typically the previous round's rate.
    D : float, optional
        Gradient-norm bound used for the upper clip.

    Returns
    -------
    float
    """
    eta, ok = _solve(theta_i, grad, phi1_t, phi2_next, cfg, eta_init, D)
    if not ok:
        warnings.warn("damped rate iteration did not settle; root found by bracketing", RateSolveWarning)
    return eta


def decay_lr(eta_prev: float, eta_new: float, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return gamma * eta_prev + (1.0 - gamma) * eta_new


def fednorm_rate(theta_i: float, grad, phi1_t, phi1_next, beta: float) -> float:
    """One-step minimiser of ``(1-beta) eta^2 + beta |phi1(t) - eta g - phi1(t+1)|^2``, clipped to [0, 1].

    ``theta_i`` is accepted for signature parity with the entropy rate; the
    norm objective does not depend on it.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    grad = as_vector(grad, "grad")
    gap = as_vector(phi1_t, "phi1_t") - as_vector(phi1_next, "phi1_next")
    num = beta * dot(gap, grad)
    den = (1.0 - beta) + beta * dot(grad, grad)
    return min(max(num / den, 0.0), 1.0)


# -- fixed point ---------------------------------------------------------------

@dataclass
class MeanFieldTrajectory:
    phi1: np.ndarray            # (T+1, d)
    phi2: np.ndarray            # (T+1,)
    eta: np.ndarray             # (N, T); the terminal rate eta(T) is 0 and not stored
    beta: float | None
    converged: bool
    outer_iterations: int
    gaps: tuple[float, float] = (math.inf, math.inf)
    inner_warnings: int = 0
    gap_history: list[tuple[float, float]] = field(default_factory=list, repr=False)

    @property
    def T(self) -> int:
        return self.phi2.shape[0] - 1

    @property
    def d(self) -> int:
        return self.phi1.shape[1]

    @property
    def N(self) -> int:
        return self.eta.shape[0]

    def rate(self, i: int, t: int) -> float:
        return 0.0 if t >= self.T else float(self.eta[i, t])

    def to_bytes(self) -> bytes:
        head = MFT_MAGIC + struct.pack("<5I", self.d, self.N, self.T, self.outer_iterations, int(self.converged))
        body = (np.ascontiguousarray(self.phi1, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.phi2, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.eta, dtype="<f8").tobytes())
        return head + body

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, beta: float | None = None) -> "MeanFieldTrajectory":
        if raw[:4] != MFT_MAGIC:
            raise ValueError(f"bad magic {raw[:4]!r}, expected {MFT_MAGIC!r}")
        if len(raw) < 24:
            raise ValueError("truncated trajectory header")
        d, N, T, K, conv = struct.unpack_from("<5I", raw, 4)
        n1, n2, n3 = (T + 1) * d, T + 1, N * T
        expected = 24 + 8 * (n1 + n2 + n3)
        if len(raw) != expected:
            raise ValueError(f"trajectory payload is {len(raw)} bytes, header implies {expected}")
        vals = np.frombuffer(raw, dtype="<f8", offset=24).astype(np.float64)
        return cls(
            phi1=vals[:n1].reshape(T + 1, d),
            phi2=vals[n1:n1 + n2].copy(),
            eta=vals[n1 + n2:].reshape(N, T),
            beta=beta,
            converged=bool(conv),
            outer_iterations=K,
        )

    @classmethod
    def load(cls, path, beta: float | None = None) -> "MeanFieldTrajectory":
        return cls.from_bytes(Path(path).read_bytes(), beta)


GradFn = Callable[[int, int, np.ndarray], np.ndarray]


def fixed_point_batches(client_data: Sequence[Batch], T: int, batch_size: int | None,
                        seed: int) -> list[list[Batch]]:
    """One fixed mini-batch per (client, t), reused by every outer iteration."""
    out = []
    for i, (X, y) in enumerate(client_data):
        n = len(y)
        row = []
        for t in range(T):
            if batch_size is None or batch_size >= n:
                row.append(Batch(X, y))
            else:
                idx = np.sort(rng_stream(seed, Stream.FIXED_POINT, i, t).choice(n, batch_size, replace=False))
                row.append(Batch(X[idx], y[idx]))
        out.append(row)
    return out


def fixed_point(
    client_data: Sequence[Batch],
    theta: Sequence[float],
    spec: ModelSpec,
    w0,
    T: int,
    cfg: RateSolveConfig,
    eps1: float = 1e-3,
    eps2: float = 1e-3,
    max_outer: int = 200,
    batch_size: int | None = None,
    seed: int = 0,
    rate: str = "fedent",
    grad_fn: GradFn | None = None,
) -> MeanFieldTrajectory:
    """Iterate the mean-field estimators to a fixed point.

    Every outer iteration sweeps ``t = 0 .. T-1``: each client takes one
    step ``w_i(t+1) = phi1(t) - eta_i(t) grad F_i(phi1(t))`` with its rate
    solved against the current estimates, and the weighted aggregates of
    the resulting local parameters become the new ``phi1(t+1)`` and
    ``phi2(t+1)``.  The sweep is Gauss-Seidel in time (``phi1(t)`` is the
    value produced earlier in the same sweep) while ``phi2(t+1)`` comes from
    the previous iterate.  Iteration stops once the max-abs change of
    ``phi1`` is below ``eps1`` and that of ``phi2`` is below ``eps2``.

    ``rate="fednorm"`` swaps the entropy rate for the norm-penalty rate,
    which needs ``phi1(t+1)`` from the previous iterate instead of ``phi2``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError("eps1 and eps2 must be positive")
    if rate not in ("fedent", "fednorm"):
        raise ValueError(f"unknown rate rule {rate!r}")
    theta = np.asarray(theta, dtype=np.float64)
    N = theta.shape[0]
    if grad_fn is None:
        if len(client_data) != N:
            raise ValueError(f"{len(client_data)} client datasets but {N} weights")
        batches = fixed_point_batches(client_data, T, batch_size, seed)

        def grad_fn(i, t, w):
            return gradient(spec, w, batches[i][t])

    w0 = as_vector(w0, "w0").copy()
    d = w0.shape[0]
    phi1 = np.tile(w0, (T + 1, 1))
    phi2 = np.full(T + 1, float(np.sum(theta) * dot(w0, w0)))
    eta = np.zeros((N, T))
    warned = 0
    gaps = (math.inf, math.inf)
    history = []
    converged = False
    k = 0
    for k in range(1, max_outer + 1):
        new1 = phi1.copy()
        new2 = phi2.copy()
        for t in range(T):
            base = new1[t]
            agg = np.zeros(d)
            mass = 0.0
            for i in range(N):
                g = grad_fn(i, t, base)
                if rate == "fedent":
                    target = phi2[t + 1]
                    if target < PHI2_FLOOR:
                        warnings.warn(f"phi2({t + 1}) below {PHI2_FLOOR:g}; flooring", DegenerateMassWarning)
                        target = PHI2_FLOOR
                    e, ok = _solve(theta[i], g, base, target, cfg, eta_init=eta[i, t])
                    warned += not ok
                else:
                    e = fednorm_rate(theta[i], g, base, phi1[t + 1], cfg.beta)
                eta[i, t] = e
                w_i = base - e * g
                if not np.all(np.isfinite(w_i)):
                    raise FloatingPointError(f"non-finite parameter at outer iteration k={k}, t={t}, client={i}")
                agg += theta[i] * w_i
                mass += theta[i] * dot(w_i, w_i)
            new1[t + 1] = agg
            new2[t + 1] = mass
        gaps = (float(np.max(np.abs(new1 - phi1))), float(np.max(np.abs(new2 - phi2))))
        history.append(gaps)
        phi1, phi2 = new1, new2
        if gaps[0] < eps1 and gaps[1] < eps2:
            converged = True
            break
    check_finite(phi1.ravel(), "phi1")
    return MeanFieldTrajectory(phi1, phi2, eta.copy(), cfg.beta, converged, k, gaps, warned, history)


def replay(trajectory: MeanFieldTrajectory, theta: Sequence[float], grad_fn: GradFn,
           cfg: RateSolveConfig | None = None) -> tuple[np.ndarray, np.ndarray, list[list[np.ndarray]]]:
    """Regenerate the local parameters implied by a trajectory.

    Returns the re-aggregated ``phi1`` and ``phi2`` sequences (index 0 copied
    from the trajectory) and ``locals_[t][i] = w_i(t+1)``.  Rates are
    re-solved against the trajectory's estimates when ``cfg`` is given,
    otherwise the stored rates are used.
    """
    theta = np.asarray(theta, dtype=np.float64)
    T, N = trajectory.T, trajectory.N
    agg1 = trajectory.phi1.copy()
    agg2 = trajectory.phi2.copy()
    locals_ = []
    for t in range(T):
        base = trajectory.phi1[t]
        row = []
        for i in range(N):
            g = grad_fn(i, t, base)
            if cfg is None:
                e = trajectory.eta[i, t]
            else:
                e, _ = _solve(theta[i], g, base, max(trajectory.phi2[t + 1], PHI2_FLOOR), cfg,
                              eta_init=trajectory.eta[i, t])
            row.append(base - e * g)
        locals_.append(row)
        agg1[t + 1] = sum(th * w for th, w in zip(theta, row))
        agg2[t + 1] = sum(th * dot(w, w) for th, w in zip(theta, row))
    return agg1, agg2, locals_


@dataclass(frozen=True)
class FixedPointConfig:
    eps1: float = 1e-3
    eps2: float = 1e-3
    max_outer: int = 200
    inner_tol: float = 1e-8
    inner_max_iters: int = 100
    damping: float = 0.5

    def __post_init__(self):
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("eps1 and eps2 must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")

    def rate_config(self, beta: float) -> RateSolveConfig:
        return RateSolveConfig(beta, self.inner_tol, self.inner_max_iters, self.damping)
