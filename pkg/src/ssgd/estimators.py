"""Hypergradient estimators: stochastic backprop, Neumann series and SGD solves.

All three estimate

    grad Phi(x) = grad_x f(x, y*) - d_x d_y g(x, y*) [d2_yy g(x, y*)]^{-1} grad_y f(x, y*)

from sampled oracle calls at an approximate lower-level solution y_T.
Every sample set is drawn independently from ``rng``; nothing is reused
except where the estimator itself prescribes it (the D_F batch in the
backprop and Neumann estimators feeds both grad_x F and grad_y F).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence, Union

import numpy as np

from .core import (
    BilevelOracle,
    DivergenceError,
    InvalidArgumentError,
    InvalidStateError,
    check_iterate,
)

if TYPE_CHECKING:
    from .theory import LipschitzProfile

StepSize = Union[float, Callable[[int], float]]


class Method(str, enum.Enum):
    BP = "bp"
    NS = "ns"
    SGD = "sgd"


@dataclass
class EstimatorConfig:
    method: Method = Method.SGD
    J: int = 1
    eta: float = 0.1
    warm_start: bool = False
    D_f: int = 5
    D_g: int = 5
    D: int = 5

    def __post_init__(self):
        self.method = Method(self.method)
        if self.J < 1:
            raise InvalidArgumentError(f"J must be >= 1, got {self.J}")
        if not self.eta > 0:
            raise InvalidArgumentError(f"eta must be positive, got {self.eta}")
        for name in ("D_f", "D_g", "D"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.warm_start and self.method is not Method.SGD:
            raise InvalidArgumentError("warm_start only applies to the SGD estimator")


@dataclass
class WarmState:
    """Lower-level iterate y and linear-system iterate v carried across outer steps."""

    y: np.ndarray
    v: np.ndarray


@dataclass
class BpTape:
    """Batches and iterates y^0..y^{T-1} of one lower-level SGD run."""

    batches: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.batches)


def _step_at(beta: StepSize, t: int) -> float:
    return float(beta(t)) if callable(beta) else float(beta)


def ll_sgd(
    oracle: BilevelOracle,
    x: np.ndarray,
    y0: np.ndarray,
    T: int,
    beta: StepSize,
    S: int,
    rng,
    record_tape: bool = False,
) -> tuple[np.ndarray, BpTape | None]:
    """Run T SGD steps on the lower-level objective starting from y0.

    ``beta`` is either a constant or a function of the step index t.
    """
    if T < 0:
        raise InvalidArgumentError(f"T must be >= 0, got {T}")
    y = np.array(y0, dtype=float, copy=True)
    tape = BpTape() if record_tape else None
    for t in range(T):
        step = _step_at(beta, t)
        if not step > 0:
            raise InvalidArgumentError(f"lower-level step size must be positive, got {step}")
        batch = rng.batch(oracle.n_lower, S)
        if tape is not None:
            tape.batches.append(batch)
            tape.iterates.append(y.copy())
            tape.steps.append(step)
        try:
            y = y - step * oracle.grad_y_G(x, y, batch)
            check_iterate("y", y)
        except DivergenceError as exc:
            raise DivergenceError(f"lower-level SGD diverged at step {t} with beta={step:g}: {exc}") from exc
    return y, tape


def assemble_hypergradient(oracle, x, y, v, D_f, D_g, rng) -> np.ndarray:
    """grad_x F(x, y; D_F) - d_x d_y G(x, y; D_G) v, with independent batches."""
    if np.shape(v) != (oracle.dim_y,):
        raise InvalidStateError(f"v has shape {np.shape(v)}, expected ({oracle.dim_y},)")
    d_f = rng.batch(oracle.n_upper, D_f)
    d_g = rng.batch(oracle.n_lower, D_g)
    return oracle.grad_x_F(x, y, d_f) - oracle.jvp_xy_G(x, y, v, d_g)


def estimate_bp(oracle, x, y_T, tape: BpTape, beta: StepSize | None, D_f, rng) -> np.ndarray:
    """Backpropagate through the recorded lower-level SGD trajectory.

    Evaluates grad_x F - sum_t beta_t J_t A_t grad_y F right to left, where
    J_t = d_x d_y G(x, y^t; S_t) and A_t is the product of the
    (I - beta_i d2_yy G(x, y^i; S_i)) factors for i > t. Step sizes are
    taken from the tape; ``beta`` overrides them when given.
    """
    T = len(tape)
    if len(tape.iterates) != T or len(tape.steps) != T:
        raise InvalidStateError("corrupt tape")
    d_f = rng.batch(oracle.n_upper, D_f)
    gx = oracle.grad_x_F(x, y_T, d_f)
    w = oracle.grad_y_F(x, y_T, d_f)
    acc = np.zeros_like(gx)
    for t in range(T - 1, -1, -1):
        y_t = tape.iterates[t]
        if np.shape(y_t) != np.shape(w):
            raise InvalidStateError("tape iterate dimension does not match the oracle")
        step = tape.steps[t] if beta is None else _step_at(beta, t)
        acc += step * oracle.jvp_xy_G(x, y_t, w, tape.batches[t])
        if t > 0:
            w = w - step * oracle.hvp_yy_G(x, y_t, w, tape.batches[t])
    return gx - acc


def neumann_v(oracle, x, y_T, v0, J, eta, D, rng) -> np.ndarray:
    """eta * sum_{j<J} prod (I - eta H_i) v0, evaluated Horner style (J-1 HVPs)."""
    v = v0
    for _ in range(J - 1):
        batch = rng.batch(oracle.n_lower, D)
        v = v0 + v - eta * oracle.hvp_yy_G(x, y_T, v, batch)
    return eta * v


def estimate_ns(oracle, x, y_T, J, eta, D_f, D_g, D, rng) -> np.ndarray:
    """Truncated stochastic Neumann series estimate of the hypergradient."""
    if J < 1:
        raise InvalidArgumentError(f"J must be >= 1, got {J}")
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be positive, got {eta}")
    d_f = rng.batch(oracle.n_upper, D_f)
    gx = oracle.grad_x_F(x, y_T, d_f)
    v0 = oracle.grad_y_F(x, y_T, d_f)
    v = neumann_v(oracle, x, y_T, v0, J, eta, D, rng)
    check_iterate("v", v, f"Neumann series with eta={eta:g}")
    d_g = rng.batch(oracle.n_lower, D_g)
    return gx - oracle.jvp_xy_G(x, y_T, v, d_g)


def sgd_v(oracle, x, y, v0, J, eta, D_f, D, rng, v_bound: float | None = None) -> np.ndarray:
    """J SGD steps on 1/2 v'Hv - v'grad_y f, fresh batches each step."""
    v = np.array(v0, dtype=float, copy=True)
    if v.shape != (oracle.dim_y,):
        raise InvalidStateError(f"v has shape {v.shape}, expected ({oracle.dim_y},)")
    for j in range(J):
        b = rng.batch(oracle.n_lower, D)
        d_fj = rng.batch(oracle.n_upper, D_f)
        v = v - eta * oracle.hvp_yy_G(x, y, v, b) + eta * oracle.grad_y_F(x, y, d_fj)
        check_iterate("v", v, f"linear-system SGD step {j} with eta={eta:g}")
        if v_bound is not None and np.linalg.norm(v) > v_bound * (1 + 1e-9):
            raise InvalidStateError(
                f"||v|| = {np.linalg.norm(v):.6g} exceeds the M/mu bound {v_bound:.6g}"
            )
    return v


def estimate_sgd(
    oracle,
    x,
    y_T,
    state: WarmState,
    J,
    eta,
    D_f,
    D,
    rng,
    warm_start: bool,
    D_g: int | None = None,
    v_bound: float | None = None,
) -> tuple[np.ndarray, WarmState]:
    """SGD-based estimate; v starts from ``state.v`` when warm_start else 0."""
    if J < 1:
        raise InvalidArgumentError(f"J must be >= 1, got {J}")
    v0 = state.v if warm_start else np.zeros(oracle.dim_y)
    v = sgd_v(oracle, x, y_T, v0, J, eta, D_f, D, rng, v_bound)
    h = assemble_hypergradient(oracle, x, y_T, v, D_f, D_f if D_g is None else D_g, rng)
    return h, WarmState(y=np.array(y_T, copy=True), v=v)


def bias_bound(
    profile: "LipschitzProfile",
    method,
    T: int,
    J: int,
    eta: float,
    dist_y: float | Sequence[float],
    dist_v0: float,
    beta: float | None = None,
) -> float:
    """Upper bound on ||grad Phi(x) - E[h_f | y trajectory]|| for one estimator.

    ``dist_y`` is ||y^T - y*(x)||. For backprop it may instead be the
    sequence of distances ||y^t - y*(x)||, t = 0..T, which the bound sums
    over; a scalar is used for every t. ``dist_v0`` is ||v^0 - v*|| for
    the SGD estimator and ||d_x d_y g (d2_yy g)^{-1}|| at y* otherwise.

    Only valid for mu < 1, L < 1 and beta = eta < 1.
    """
    method = Method(method)
    mu, L, M = profile.mu, profile.L, profile.M
    tau, rho = profile.tau, profile.rho
    if not mu < 1:
        raise InvalidArgumentError(f"bias bound needs mu < 1, got mu={mu}")
    if not L < 1:
        raise InvalidArgumentError(f"bias bound needs L < 1, got L={L}")
    if not 0 < eta < 1:
        raise InvalidArgumentError(f"bias bound needs 0 < eta < 1, got eta={eta}")
    if beta is not None and beta != eta:
        raise InvalidArgumentError(f"bias bound needs beta == eta, got beta={beta}, eta={eta}")
    if T < 1 or J < 1:
        raise InvalidArgumentError("T and J must be positive")

    q = 1.0 - eta * mu
    if np.ndim(dist_y) == 0:
        path = np.full(T + 1, float(dist_y))
    else:
        path = np.asarray(dist_y, dtype=float)
        if path.shape != (T + 1,):
            raise InvalidArgumentError(f"dist_y path must have T+1={T + 1} entries")
    d_T = path[-1]

    if method is Method.BP:
        # sum_t q^t ||y^{T-1-t} - y*||
        tail = sum(q**t * path[T - 1 - t] for t in range(T))
        return L * (1 + L / mu) * d_T + M * q**T * dist_v0 + M * eta * (L / mu * rho + tau) * tail
    geo = sum(q**t for t in range(J))
    if method is Method.NS:
        return L * (1 + L / mu) * d_T + M * q**J * dist_v0 + M * eta * (L / mu * rho + tau) * geo * d_T
    return (L + M / mu * tau) * d_T + L * q**J * dist_v0 + L * eta * (M / mu * rho + L) * geo * d_T
