"""Outer loops: the generic simple-SGD driver, SSGD and the BSA/TTSA/stocBiO baselines."""
from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    BilevelOracle,
    DivergenceError,
    InvalidArgumentError,
    RngStream,
    check_iterate,
)
from .estimators import (
    EstimatorConfig,
    Method,
    WarmState,
    assemble_hypergradient,
    estimate_bp,
    estimate_ns,
    estimate_sgd,
    ll_sgd,
    sgd_v,
)

TRACE_HEADER = ("iter", "elapsed_s", "phi", "grad_norm", "gc_f", "gc_g", "jv_g", "hv_g")


@dataclass
class TraceRow:
    iter: int
    elapsed_s: float
    phi: float
    grad_norm: float
    gc_f: int
    gc_g: int
    jv_g: int
    hv_g: int

    @property
    def total_calls(self) -> int:
        return self.gc_f + self.gc_g + self.jv_g + self.hv_g


@dataclass
class RunTrace:
    """Metrics recorded at outer iterations 0..K (every ``record_every``-th, plus K)."""

    rows: list[TraceRow] = field(default_factory=list)
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    v: np.ndarray | None = None
    label: str = ""

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def grad_norms(self) -> np.ndarray:
        return self.column("grad_norm")

    def first_below(self, threshold: float) -> TraceRow | None:
        """First recorded row with grad_norm <= threshold, or None."""
        for row in self.rows:
            if row.grad_norm <= threshold:
                return row
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in self.rows:
                w.writerow([r.iter, repr(r.elapsed_s), repr(r.phi), repr(r.grad_norm),
                            r.gc_f, r.gc_g, r.jv_g, r.hv_g])

    @classmethod
    def read_csv(cls, path) -> "RunTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != TRACE_HEADER:
                raise InvalidArgumentError(f"{path}: unexpected trace header {header}")
            rows = [TraceRow(int(a), float(b), float(c), float(d), int(e), int(f), int(g), int(h))
                    for a, b, c, d, e, f, g, h in reader]
        return cls(rows=rows, label=Path(path).stem)


class _Recorder:
    """Appends trace rows; evaluation calls are not counted."""

    def __init__(self, oracle: BilevelOracle, K: int, record_every: int, label: str,
                 max_calls: int | None = None, stop_grad_norm: float | None = None):
        if record_every < 1:
            raise InvalidArgumentError("record_every must be >= 1")
        if max_calls is not None and max_calls < 1:
            raise InvalidArgumentError("max_calls must be >= 1")
        self.max_calls = max_calls
        self.stop_grad_norm = stop_grad_norm
        self.oracle = oracle
        self.K = K
        self.every = record_every
        self.trace = RunTrace(label=label)
        self.t0 = time.perf_counter()

    @property
    def exhausted(self) -> bool:
        return self.max_calls is not None and self.oracle.counters.total >= self.max_calls

    @property
    def done(self) -> bool:
        if self.exhausted:
            return True
        return (self.stop_grad_norm is not None and bool(self.trace.rows)
                and self.trace.rows[-1].grad_norm <= self.stop_grad_norm)

    def __call__(self, k: int, x: np.ndarray) -> None:
        check_iterate("x", x, f"outer iteration {k}")
        if k % self.every and k != self.K and not self.exhausted:
            return
        elapsed = time.perf_counter() - self.t0
        phi = float(self.oracle.phi(x))
        gn = float(np.linalg.norm(self.oracle.grad_phi(x)))
        c = self.oracle.counters
        self.trace.rows.append(TraceRow(k, elapsed, phi, gn, c.gc_f, c.gc_g, c.jv_g, c.hv_g))


def _vec(value, dim: int, name: str) -> np.ndarray:
    if value is None:
        return np.zeros(dim)
    arr = np.array(value, dtype=float, copy=True).reshape(-1)
    if arr.shape != (dim,):
        raise InvalidArgumentError(f"{name} has dimension {arr.size}, expected {dim}")
    return arr


def _positive(**values):
    for name, val in values.items():
        if not val > 0:
            raise InvalidArgumentError(f"{name} must be positive, got {val}")


def _at_least_one(**values):
    for name, val in values.items():
        if int(val) != val or val < 1:
            raise InvalidArgumentError(f"{name} must be an integer >= 1, got {val}")


@dataclass
class SsgdConfig:
    K: int = 1000
    T: int = 5
    J: int = 3
    alpha: float = 0.001
    beta: float = 0.1
    eta: float = 0.1
    S: int = 5
    D: int = 5
    D_g: int = 5
    D_f: int = 5
    x0: np.ndarray | None = None
    y0: np.ndarray | None = None
    v0: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        _at_least_one(K=self.K, T=self.T, J=self.J, S=self.S, D=self.D, D_g=self.D_g, D_f=self.D_f)
        _positive(alpha=self.alpha, beta=self.beta, eta=self.eta)


def run_ssgd(
    oracle: BilevelOracle,
    cfg: SsgdConfig,
    rng=None,
    record_every: int = 1,
    v_bound: float | None = None,
    label: str = "ssgd",
    max_calls: int | None = None,
    stop_grad_norm: float | None = None,
) -> RunTrace:
    """SSGD: x step with the current estimate, then warm-started y and v loops.

    h_f^0 is assembled from (x0, y0, v0) before the loop. The estimate
    after the last x step would never be consumed and is not computed, so
    the counters match K(J+1)D_f, KTS, KD_g and KJD exactly.
    With ``max_calls`` the run stops after the first outer iteration that
    brings the total counter units to the budget, and ``stop_grad_norm``
    ends it at the first recorded ||grad Phi|| at or below the value.
    """
    rng = RngStream(cfg.seed) if rng is None else rng
    x = _vec(cfg.x0, oracle.dim_x, "x0")
    y = _vec(cfg.y0, oracle.dim_y, "y0")
    v = _vec(cfg.v0, oracle.dim_y, "v0")
    rec = _Recorder(oracle, cfg.K, record_every, label, max_calls, stop_grad_norm)
    h = assemble_hypergradient(oracle, x, y, v, cfg.D_f, cfg.D_g, rng)
    rec(0, x)
    for k in range(cfg.K):
        try:
            x = x - cfg.alpha * h
            y, _ = ll_sgd(oracle, x, y, cfg.T, cfg.beta, cfg.S, rng)
            v = sgd_v(oracle, x, y, v, cfg.J, cfg.eta, cfg.D_f, cfg.D, rng, v_bound)
            if k < cfg.K - 1:
                h = assemble_hypergradient(oracle, x, y, v, cfg.D_f, cfg.D_g, rng)
            rec(k + 1, x)
            if rec.done:
                break
        except DivergenceError as exc:
            raise DivergenceError(f"{label}: outer iteration {k}: {exc}") from exc
    rec.trace.x, rec.trace.y, rec.trace.v = x, y, v
    return rec.trace


def run_algorithm1(
    oracle: BilevelOracle,
    estimator: EstimatorConfig,
    K: int,
    T: int,
    alpha: float,
    beta: float,
    init: dict | None = None,
    rng=None,
    S: int = 5,
    warm_start_y: bool = False,
    record_every: int = 1,
    seed: int = 0,
    label: str | None = None,
    max_calls: int | None = None,
    stop_grad_norm: float | None = None,
) -> RunTrace:
    """Generic simple SGD type loop: T lower SGD steps, one estimate, one x step.

    The lower loop restarts from zero every outer iteration unless
    ``warm_start_y`` is set, in which case it continues from the previous
    y^{k,T}. ``init`` may hold x0, y0 (first lower-level start) and v0.
    """
    _at_least_one(K=K, S=S)
    if T < 0 or (T == 0 and estimator.method is not Method.BP):
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    if alpha < 0:
        raise InvalidArgumentError("alpha must be nonnegative")
    _positive(beta=beta)
    init = init or {}
    rng = RngStream(seed) if rng is None else rng
    label = label or f"alg1_{estimator.method.value}"
    x = _vec(init.get("x0"), oracle.dim_x, "x0")
    y = _vec(init.get("y0"), oracle.dim_y, "y0")
    state = WarmState(y=y, v=_vec(init.get("v0"), oracle.dim_y, "v0"))
    rec = _Recorder(oracle, K, record_every, label, max_calls, stop_grad_norm)
    rec(0, x)
    est = estimator
    for k in range(K):
        try:
            y_start = state.y if (warm_start_y or k == 0) else np.zeros(oracle.dim_y)
            y_T, tape = ll_sgd(oracle, x, y_start, T, beta, S, rng,
                               record_tape=est.method is Method.BP)
            if est.method is Method.BP:
                h = estimate_bp(oracle, x, y_T, tape, None, est.D_f, rng)
                state = WarmState(y_T, state.v)
            elif est.method is Method.NS:
                h = estimate_ns(oracle, x, y_T, est.J, est.eta, est.D_f, est.D_g, est.D, rng)
                state = WarmState(y_T, state.v)
            else:
                h, state = estimate_sgd(oracle, x, y_T, state, est.J, est.eta, est.D_f, est.D,
                                        rng, est.warm_start, D_g=est.D_g)
            x = x - alpha * h
            rec(k + 1, x)
            if rec.done:
                break
        except DivergenceError as exc:
            raise DivergenceError(f"{label}: outer iteration {k}: {exc}") from exc
    rec.trace.x, rec.trace.y, rec.trace.v = x, state.y, state.v
    return rec.trace


def run_stocbio(oracle: BilevelOracle, cfg: SsgdConfig, rng=None, record_every: int = 1,
                label: str = "stocbio", max_calls: int | None = None,
                stop_grad_norm: float | None = None) -> RunTrace:
    """Warm-started lower loop plus a fresh stochastic Neumann estimate per step."""
    est = EstimatorConfig(Method.NS, J=cfg.J, eta=cfg.eta, D_f=cfg.D_f, D_g=cfg.D_g, D=cfg.D)
    init = {"x0": cfg.x0, "y0": cfg.y0}
    return run_algorithm1(oracle, est, cfg.K, cfg.T, cfg.alpha, cfg.beta, init=init, rng=rng,
                          S=cfg.S, warm_start_y=True, record_every=record_every, seed=cfg.seed,
                          label=label, max_calls=max_calls,
                          stop_grad_norm=stop_grad_norm)


def _power(n: int, num: int, den: int) -> float:
    """n^(num/den), exact when n is a perfect den-th power."""
    root = round(n ** (1.0 / den))
    for r in (root - 1, root, root + 1):
        if r >= 0 and r**den == n:
            return float(r**num)
    return n ** (num / den)


class ScheduleKind(str, enum.Enum):
    BSA = "bsa"
    TTSA = "ttsa"


@dataclass
class ScheduleConfig:
    """Decaying step-size schedules of the BSA and TTSA baselines.

    BSA:  alpha_k = d_alpha / (1+k)^(1/2),  T_k = ceil((k+1)^(1/2)),  beta_t = d_beta / (t+2)
    TTSA: alpha_k = d_alpha / (1+k)^(3/5),  beta_k = d_beta / (1+k)^(2/5),  one lower step per k
    Both use batch size ``batch`` everywhere and a J-term Neumann estimate.
    """

    kind: ScheduleKind = ScheduleKind.BSA
    d_alpha: float = 0.1
    d_beta: float = 0.1
    J: int = 3
    eta: float = 0.1
    batch: int = 1
    seed: int = 0
    x0: np.ndarray | None = None
    y0: np.ndarray | None = None

    def __post_init__(self):
        self.kind = ScheduleKind(self.kind)
        _positive(d_alpha=self.d_alpha, d_beta=self.d_beta, eta=self.eta)
        _at_least_one(J=self.J, batch=self.batch)

    def alpha(self, k: int) -> float:
        if self.kind is ScheduleKind.BSA:
            return self.d_alpha / _power(1 + k, 1, 2)
        return self.d_alpha / _power(1 + k, 3, 5)

    def beta(self, i: int) -> float:
        """BSA: inner step t; TTSA: outer step k."""
        if self.kind is ScheduleKind.BSA:
            return self.d_beta / (i + 2)
        return self.d_beta / _power(1 + i, 2, 5)

    def inner_steps(self, k: int) -> int:
        if self.kind is ScheduleKind.TTSA:
            return 1
        s = math.isqrt(k + 1)
        return s if s * s == k + 1 else s + 1


def _run_schedule(oracle, sched: ScheduleConfig, K, rng, record_every, label, max_calls,
                  stop_grad_norm):
    _at_least_one(K=K)
    rng = RngStream(sched.seed) if rng is None else rng
    x = _vec(sched.x0, oracle.dim_x, "x0")
    y = _vec(sched.y0, oracle.dim_y, "y0")
    rec = _Recorder(oracle, K, record_every, label, max_calls, stop_grad_norm)
    rec(0, x)
    B = sched.batch
    for k in range(K):
        try:
            if sched.kind is ScheduleKind.BSA:
                y, _ = ll_sgd(oracle, x, y, sched.inner_steps(k), sched.beta, B, rng)
            else:
                y, _ = ll_sgd(oracle, x, y, 1, sched.beta(k), B, rng)
            h = estimate_ns(oracle, x, y, sched.J, sched.eta, B, B, B, rng)
            x = x - sched.alpha(k) * h
            rec(k + 1, x)
            if rec.done:
                break
        except DivergenceError as exc:
            raise DivergenceError(f"{label}: outer iteration {k}: {exc}") from exc
    rec.trace.x, rec.trace.y = x, y
    return rec.trace


def run_bsa(oracle, sched: ScheduleConfig, K: int, rng=None, record_every: int = 1,
            label: str = "bsa", max_calls: int | None = None,
            stop_grad_norm: float | None = None) -> RunTrace:
    if sched.kind is not ScheduleKind.BSA:
        raise InvalidArgumentError("run_bsa needs a BSA schedule")
    return _run_schedule(oracle, sched, K, rng, record_every, label, max_calls,
                         stop_grad_norm)


def run_ttsa(oracle, sched: ScheduleConfig, K: int, rng=None, record_every: int = 1,
             label: str = "ttsa", max_calls: int | None = None,
             stop_grad_norm: float | None = None) -> RunTrace:
    if sched.kind is not ScheduleKind.TTSA:
        raise InvalidArgumentError("run_ttsa needs a TTSA schedule")
    return _run_schedule(oracle, sched, K, rng, record_every, label, max_calls,
                         stop_grad_norm)
