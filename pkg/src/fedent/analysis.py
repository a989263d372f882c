"""Runtime evaluation of the convergence bounds and client-drift diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import as_vector, l2norm

BOUND_NAMES = ("round_gap", "drift", "loss_decrease", "rate_factor")
SLACK = 1e-9


@dataclass(frozen=True)
class BoundReport:
    round: int
    lhs: float
    rhs: float
    name: str
    satisfied: bool = False

    def __post_init__(self):
        if self.name not in BOUND_NAMES:
            raise ValueError(f"unknown bound {self.name!r}")
        object.__setattr__(self, "satisfied", bool(self.lhs <= self.rhs + SLACK))


def drift(global_w, locals_: Sequence[np.ndarray]) -> np.ndarray:
    """Per-client distance ``|w - w_i|`` between the global and local parameters."""
    global_w = as_vector(global_w, "global_w")
    out = np.empty(len(locals_))
    for i, w in enumerate(locals_):
        w = as_vector(w, f"locals[{i}]")
        if w.shape != global_w.shape:
            raise ValueError(f"dimension mismatch: locals[{i}] has {w.shape[0]}, expected {global_w.shape[0]}")
        out[i] = l2norm(global_w - w)
    return out


def drift_bound_G(theta: Sequence[float], beta: float, D: float, phi1_prev_norm: float, phi2_t: float) -> float:
    """``G = sum_j 2 beta theta_j^2 D^2 |phi1(t-1)| / ((1 - beta) phi2(t))``."""
    if phi2_t <= 0:
        raise ValueError("phi2_t must be positive")
    if beta == 0:
        return 0.0
    scale = 2.0 * beta * D * D * phi1_prev_norm / ((1.0 - beta) * phi2_t)
    return float(sum(scale * th * th for th in theta))


def round_gap_bound(theta: Sequence[float], beta: float, D: float, phi1_norm: float, phi2_next: float,
                    grad_norms: Sequence[float] | None = None) -> float:
    """Bound on ``|w(t+1) - w(t)|``; uses ``D`` for every client unless gradient norms are given."""
    if phi2_next <= 0:
        raise ValueError("phi2_next must be positive")
    theta = list(theta)
    g = [D] * len(theta) if grad_norms is None else list(grad_norms)
    if len(g) != len(theta):
        raise ValueError("grad_norms and theta differ in length")
    scale = 2.0 * beta * D * phi1_norm / ((1.0 - beta) * phi2_next)
    return float(sum(scale * th * th * gi for th, gi in zip(theta, g)))


def loss_decrease_rhs(theta: Sequence[float], beta: float, L: float, D: float, phi1_norm: float,
                      phi2_next: float) -> float:
    """Right side of the one-round loss-decrease bound, evaluated literally.

    ``(L/2) [sum_i 2 beta theta_i^2 D^2 |phi1(t)| / ((1-beta) phi2(t+1))]^2 - D``
    """
    inner = round_gap_bound(theta, beta, D, phi1_norm, phi2_next)
    return 0.5 * L * inner * inner - D


def loss_decrease_check(F_t: float, F_next: float, bound_rhs: float, round: int = 0) -> BoundReport:
    if not math.isfinite(bound_rhs):
        raise ValueError("bound_rhs must be finite")
    return BoundReport(round, F_next - F_t, bound_rhs, "loss_decrease")


def kappa(beta: float, L: float, delta: float, D: float, phi1_norm: float, phi2_next: float) -> float:
    """Per-round contraction factor ``1 - (1 + 1/(1-beta)) 4 L delta D^2 |phi1|^2 / phi2^2``."""
    if phi2_next <= 0:
        raise ValueError("phi2_next must be positive")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return 1.0 - (1.0 + 1.0 / (1.0 - beta)) * 4.0 * L * delta * D * D * phi1_norm ** 2 / phi2_next ** 2


def estimate_pl_delta(history: Iterable[tuple[float, float]], F_star_proxy: float | None = None) -> float:
    """Smallest observed ``|grad F|^2 / (2 (F - F*))``.

    ``history`` holds ``(loss, grad_norm)`` pairs.  ``F*`` defaults to the best
    loss in the history, whose own record is then ineligible.
    """
    history = list(history)
    if F_star_proxy is None:
        if not history:
            raise ValueError("trajectory at optimum: empty history")
        F_star_proxy = min(f for f, _ in history)
    ratios = [g * g / (2.0 * (f - F_star_proxy)) for f, g in history if f > F_star_proxy + 1e-12]
    if not ratios:
        raise ValueError("trajectory at optimum: no record above the F* proxy")
    return float(min(ratios))


def bound_reports(history, trajectory, beta: float, D: float) -> list[BoundReport]:
    """Round-gap and drift reports for every traced round of a run.

    ``history`` must carry a trace.  Bounds are evaluated on the trajectory's
    ``phi`` values with the aggregation weights actually used each round.
    """
    if history.trace is None:
        raise ValueError("history was recorded without a trace")
    out = []
    for r, tr in enumerate(history.trace):
        t = r + 1
        gap = l2norm(tr.global_after - tr.global_before)
        out.append(BoundReport(t, gap, round_gap_bound(tr.weights, beta, D, l2norm(trajectory.phi1[r]),
                                                       trajectory.phi2[r + 1]), "round_gap"))
        G = drift_bound_G(tr.weights, beta, D, l2norm(trajectory.phi1[r]), trajectory.phi2[t])
        worst = float(np.max(drift(tr.global_after, tr.locals)))
        out.append(BoundReport(t, worst, G, "drift"))
    return out
