"""Decentralized SGD with pluggable averaging schemes.

Every round, each node takes a local stochastic gradient half-step and the
half-step matrix is handed to an averaging scheme ``h(X, Y) -> (X+, Y+)``
that must preserve the column average and contract the Lyapunov function
``Psi(X, Y) = ||X - Xbar||_F^2 + ||X - Y||_F^2`` at some linear rate
``p in (0, 1]``:

* ``ExactAveraging`` -- full-precision gossip ``X+ = X ((1-gamma) I +
  gamma W)`` with ``p = gamma * delta``; at ``gamma = 1`` this is plain
  decentralized SGD (neighbors average the raw half-steps).
* ``TrackingAveraging`` -- the compressed-correction gossip of
  :mod:`gossipsim.consensus` with ``p = delta^2 * omega / 82``.  With
  identity compression and ``gamma = 1`` it reduces exactly to plain
  decentralized SGD.

Suboptimality is measured at the node average ``f(xbar) - f*`` -- a
simulator-only observable that is never fed back into node updates -- and
a weighted averaged iterate ``x_avg = (1/S_T) sum_t (a+t)^2 xbar_t`` is
maintained alongside.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .compression import CompressionSpec, Identity, compress, is_random, omega as omega_of
from .consensus import DivergenceError
from .objectives import Objective
from .records import OptimizeRecord
from .streams import StreamPool, stream, tag_code
from .topology import GossipMatrix

_GRAD_TAG = tag_code("grad")
_COMPRESS_TAG = tag_code("compress")

__all__ = [
    "TheoreticalSchedule",
    "PracticalSchedule",
    "schedule_eta",
    "theoretical_stepsize",
    "blackbox_stepsize_requirement",
    "ExactAveraging",
    "TrackingAveraging",
    "AveragedIterate",
    "SgdConfig",
    "OptimizationResult",
    "sgd_round",
    "run_optimization",
]

THEORY_STEPSIZE_NUMERATOR = 410.0
THEORY_KAPPA_FACTOR = 16.0


@dataclass(frozen=True)
class TheoreticalSchedule:
    """``eta_t = 4 / (mu (a + t))`` with weight parameter ``a``."""

    mu: float
    a: float

    def eta(self, t: int) -> float:
        return 4.0 / (self.mu * (self.a + t))


@dataclass(frozen=True)
class PracticalSchedule:
    """``eta_t = m * a / (t + b)``, the decaying schedule used in sweeps."""

    a: float
    b: float
    m: int

    def eta(self, t: int) -> float:
        return self.m * self.a / (t + self.b)


Schedule = TheoreticalSchedule | PracticalSchedule


def schedule_eta(schedule: Schedule, t: int) -> float:
    return schedule.eta(t)


def theoretical_stepsize(
    mu: float, big_l: float, delta: float, omega: float, t: int
) -> tuple[float, float]:
    """``(eta_t, a)`` with ``a = max(410/(delta^2 omega), 16 L/mu)``.

    This is the specialization of :func:`blackbox_stepsize_requirement` to
    the tracking averaging scheme, whose contraction parameter is
    ``p = delta^2 omega / 82`` (so ``5/p = 410/(delta^2 omega)``).
    """
    if min(mu, big_l, delta, omega) <= 0:
        raise ValueError("mu, L, delta and omega must be positive")
    a = max(THEORY_STEPSIZE_NUMERATOR / (delta**2 * omega), THEORY_KAPPA_FACTOR * big_l / mu)
    return 4.0 / (mu * (a + t)), a


def blackbox_stepsize_requirement(p: float, mu: float, big_l: float) -> float:
    """Smallest schedule parameter ``a = max(5/p, 16 L/mu)`` valid for any
    average-preserving scheme that contracts the Lyapunov function at rate p."""
    if min(p, mu, big_l) <= 0:
        raise ValueError("p, mu and L must be positive")
    return max(5.0 / p, THEORY_KAPPA_FACTOR * big_l / mu)


class ExactAveraging:
    """Full-precision neighbor averaging; ``gamma = 1`` is plain gossip."""

    def __init__(self, matrix: GossipMatrix, gamma: float = 1.0):
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        self.matrix = matrix
        self.gamma = gamma

    @property
    def p(self) -> float:
        return self.gamma * self.matrix.delta

    def initial_aux(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(x0), np.zeros_like(x0)

    def apply(self, x_half, y, s, *, t: int = 0, seed: int = 0):
        del y, s, t, seed
        w = self.matrix.weights
        x_new = x_half + self.gamma * (x_half @ w - x_half)
        return x_new, x_new, x_new @ w, None


class TrackingAveraging:
    """Compressed-correction averaging with public estimates ``Y`` and
    running aggregates ``S = Y @ W`` (kept incrementally)."""

    def __init__(
        self, matrix: GossipMatrix, gamma: float, compression: CompressionSpec, d: int
    ):
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        self.matrix = matrix
        self.gamma = gamma
        self.compression = compression
        self.omega = omega_of(compression, d)
        self._pool = StreamPool()

    @property
    def p(self) -> float:
        return self.matrix.delta**2 * self.omega / 82.0

    def initial_aux(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(x0), np.zeros_like(x0)

    def apply(self, x_half, y, s, *, t: int = 0, seed: int = 0):
        n = x_half.shape[1]
        randomized = is_random(self.compression)
        q = np.empty_like(x_half)
        payloads = []
        for i in range(n):
            rng = None
            if randomized:
                rng = self._pool.get(seed, node=i, round_=t, tag=_COMPRESS_TAG)
            msg = compress(self.compression, x_half[:, i] - y[:, i], rng)
            q[:, i] = msg.dense_value
            payloads.append(msg.payload_bits)
        y_new = y + q
        s_new = s + q @ self.matrix.weights
        x_new = (x_half - self.gamma * y_new) + self.gamma * s_new
        return x_new, y_new, s_new, payloads


AveragingScheme = ExactAveraging | TrackingAveraging


class AveragedIterate:
    """Running weighted average ``(1/S_T) sum_t (a + t)^2 xbar_t``."""

    def __init__(self, a: float, dim: int):
        self.a = a
        self.weighted_sum = np.zeros(dim)
        self.weight_total = 0.0

    def update(self, t: int, xbar: np.ndarray) -> None:
        w = (self.a + t) ** 2
        self.weighted_sum += w * xbar
        self.weight_total += w

    @property
    def s_total(self) -> float:
        return self.weight_total

    def value(self) -> np.ndarray:
        if self.weight_total <= 0:
            raise ValueError("no iterates accumulated")
        return self.weighted_sum / self.weight_total


@dataclass(frozen=True)
class SgdConfig:
    matrix: GossipMatrix
    schedule: Schedule
    averaging: str = "exact"  # exact | tracking
    gamma: float = 1.0
    compression: CompressionSpec = Identity()
    iters: int = 100
    seed: int = 0
    eval_every: int = 1
    strict_theory: bool = False
    f_star: float | None = None
    fstar_tol: float = 1e-10

    def __post_init__(self):
        if self.averaging not in ("exact", "tracking"):
            raise ValueError(f"unknown averaging {self.averaging!r}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass(frozen=True)
class OptimizationResult:
    records: list[OptimizeRecord]
    final_x: np.ndarray
    x_avg: np.ndarray
    avg_subopt: float
    s_total: float
    f_star: float
    empirical_g: float


def sgd_round(
    x: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    objective: Objective,
    eta: float,
    averaging: AveragingScheme,
    t: int,
    seed: int,
    pool: StreamPool | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int] | None, float]:
    """One decentralized SGD round; returns updated state, payload bits per
    node (None when full-precision), and the largest gradient norm seen."""
    n = x.shape[1]
    grads = np.empty_like(x)
    for i in range(n):
        if pool is None:
            rng = stream(seed, node=i, round_=t, tag="grad")
        else:
            rng = pool.get(seed, node=i, round_=t, tag=_GRAD_TAG)
        grads[:, i] = objective.stochastic_gradient(i, x[:, i], rng)
    max_grad = float(np.max(np.sqrt(np.sum(grads**2, axis=0))))
    x_half = x - eta * grads
    x_new, y_new, s_new, payloads = averaging.apply(x_half, y, s, t=t, seed=seed)
    if not np.all(np.isfinite(x_new)):
        raise DivergenceError(t, float("inf"))
    return x_new, y_new, s_new, payloads, max_grad


def build_averaging(config: SgdConfig, d: int) -> AveragingScheme:
    if config.averaging == "exact":
        return ExactAveraging(config.matrix, config.gamma)
    return TrackingAveraging(config.matrix, config.gamma, config.compression, d)


def _check_theory_precondition(config: SgdConfig, objective: Objective, scheme) -> None:
    if not isinstance(config.schedule, TheoreticalSchedule):
        return
    mu, big_l = objective.constants()
    om = scheme.omega if isinstance(scheme, TrackingAveraging) else 1.0
    needed = max(
        THEORY_STEPSIZE_NUMERATOR / (config.matrix.delta**2 * om),
        THEORY_KAPPA_FACTOR * big_l / mu,
    )
    if config.schedule.a < needed * (1.0 - 1e-9):
        msg = (
            f"schedule parameter a = {config.schedule.a} is below the theoretical "
            f"requirement {needed:.6g}"
        )
        if config.strict_theory:
            raise ValueError(msg)
        warnings.warn(msg, stacklevel=3)


def run_optimization(
    config: SgdConfig, objective: Objective, initial_x: np.ndarray
) -> OptimizationResult:
    """Run decentralized SGD and track suboptimality of the node average.

    Records are taken at iteration entry every ``eval_every`` rounds and at
    the final iterate: ``f(xbar_t) - f*``, the consensus dispersion
    ``sum_i ||x_i - xbar_t||^2``, cumulative transmitted bits of completed
    rounds, and the stepsize ``eta_t``.
    """
    matrix = config.matrix
    if matrix.delta <= 0.0:
        raise ValueError("optimization requires a positive spectral gap")
    x = np.asarray(initial_x, dtype=float).copy()
    if x.ndim != 2 or x.shape[1] != matrix.n:
        raise ValueError(f"initial X must be d x {matrix.n}, got shape {x.shape}")
    d = x.shape[0]

    scheme = build_averaging(config, d)
    _check_theory_precondition(config, objective, scheme)
    f_star = config.f_star
    if f_star is None:
        from .objectives import solve_reference

        _, f_star = solve_reference(objective, config.fstar_tol)

    y, s = scheme.initial_aux(x)
    averaged = AveragedIterate(config.schedule.a, d)
    degrees = np.asarray(matrix.degrees)
    full_payload = d * config.compression.value_bits

    records: list[OptimizeRecord] = []
    bits = 0
    empirical_g = 0.0
    initial_subopt = None
    pool = StreamPool()

    for t in range(config.iters + 1):
        final = t == config.iters
        xbar = x.mean(axis=1)
        if final or t % config.eval_every == 0:
            subopt = objective.value(xbar) - f_star
            dispersion = float(np.sum((x - xbar[:, None]) ** 2))
            eta = schedule_eta(config.schedule, t)
            records.append(OptimizeRecord(t, subopt, dispersion, bits, eta))
            if initial_subopt is None:
                initial_subopt = abs(subopt)
            elif abs(subopt) > 1e6 * max(initial_subopt, 1.0):
                raise DivergenceError(t, subopt)
        if final:
            break
        averaged.update(t, xbar)
        eta = schedule_eta(config.schedule, t)
        x, y, s, payloads, g = sgd_round(x, y, s, objective, eta, scheme, t, config.seed, pool)
        empirical_g = max(empirical_g, g)
        if payloads is None:
            bits += int(np.sum(degrees)) * full_payload
        else:
            bits += int(np.dot(degrees, payloads))

    x_avg = averaged.value()
    return OptimizationResult(
        records=records,
        final_x=x,
        x_avg=x_avg,
        avg_subopt=objective.value(x_avg) - f_star,
        s_total=averaged.s_total,
        f_star=f_star,
        empirical_g=empirical_g,
    )
