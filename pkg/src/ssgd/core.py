"""Stochastic bilevel oracle interface, sampling and complexity counters."""
from __future__ import annotations

import abc
from dataclasses import dataclass, fields

import numpy as np


class BilevelError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class InvalidArgumentError(BilevelError, ValueError):
    exit_code = 2


class InvalidStateError(BilevelError, RuntimeError):
    exit_code = 2


class UnsupportedProblemError(BilevelError, TypeError):
    exit_code = 2


class DivergenceError(BilevelError, FloatingPointError):
    """An iterate became non-finite or exceeded the divergence threshold."""

    exit_code = 3


DIVERGENCE_THRESHOLD = 1e12


def check_finite(name: str, value: np.ndarray, hint: str = "") -> np.ndarray:
    if not np.all(np.isfinite(value)):
        msg = f"non-finite entries in {name}"
        raise DivergenceError(f"{msg} ({hint})" if hint else msg)
    return value


def check_iterate(name: str, value: np.ndarray, hint: str = "") -> np.ndarray:
    """Abort on non-finite entries or a norm above DIVERGENCE_THRESHOLD."""
    check_finite(name, value, hint)
    norm = float(np.linalg.norm(value))
    if norm > DIVERGENCE_THRESHOLD:
        msg = f"{name} diverged: norm {norm:.3e} > {DIVERGENCE_THRESHOLD:.0e}"
        raise DivergenceError(f"{msg} ({hint})" if hint else msg)
    return value


@dataclass(frozen=True)
class BatchSpec:
    """Sample indices into a finite dataset (repeats allowed)."""

    indices: np.ndarray

    def __post_init__(self):
        if self.indices.ndim != 1 or self.indices.size < 1:
            raise InvalidArgumentError("a batch needs at least one index")

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @classmethod
    def full(cls, dataset_size: int) -> "BatchSpec":
        return cls(np.arange(dataset_size))


class RngStream:
    """Deterministic random stream keyed by (seed, stream id).

    Two streams built from the same pair produce identical draws.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def substream(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def batch(self, dataset_size: int, batch_size: int) -> BatchSpec:
        return sample_batch(self, dataset_size, batch_size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


class FullBatchStream:
    """Drop-in replacement for RngStream that always returns the whole dataset.

    Used for the deterministic (full-batch, fixed-batch) mode.
    """

    def batch(self, dataset_size: int, batch_size: int) -> BatchSpec:
        if dataset_size < 1:
            raise InvalidArgumentError("dataset_size must be >= 1")
        return BatchSpec.full(dataset_size)


def sample_batch(rng: RngStream, dataset_size: int, batch_size: int) -> BatchSpec:
    """Draw `batch_size` indices uniformly with replacement from [0, dataset_size)."""
    if dataset_size < 1:
        raise InvalidArgumentError(f"dataset_size must be >= 1, got {dataset_size}")
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
    idx = rng.generator.integers(0, dataset_size, size=batch_size)
    return BatchSpec(idx)


@dataclass
class ComplexityCounters:
    """Per-sample counts of oracle work (a batch of B samples counts B)."""

    gc_f: int = 0
    gc_g: int = 0
    jv_g: int = 0
    hv_g: int = 0

    @property
    def total(self) -> int:
        return self.gc_f + self.gc_g + self.jv_g + self.hv_g

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.gc_f, self.gc_g, self.jv_g, self.hv_g)

    def copy(self) -> "ComplexityCounters":
        return ComplexityCounters(*self.as_tuple())

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)


def _as_batch(batch) -> BatchSpec:
    if isinstance(batch, BatchSpec):
        return batch
    return BatchSpec(np.asarray(batch, dtype=np.int64).reshape(-1))


class BilevelOracle(abc.ABC):
    """Sampled derivative oracle for min_x f(x, y*(x)), y*(x) = argmin_y g(x, y).

    f is the mean of F(x, y; xi) over the upper-level dataset (size
    ``n_upper``) and g the mean of G(x, y; zeta) over the lower-level
    dataset (size ``n_lower``). Every public derivative call increments the
    matching counter by the batch size. Subclasses implement the
    underscored methods on an index array and must return the batch mean of
    the per-sample quantities.

    One oracle belongs to one run; counters are not thread safe.
    """

    dim_x: int
    dim_y: int
    n_upper: int
    n_lower: int

    def __init__(self):
        self.counters = ComplexityCounters()

    # -- counted derivative products ---------------------------------------
    def grad_x_F(self, x, y, batch) -> np.ndarray:
        b = _as_batch(batch)
        self.counters.gc_f += b.size
        return check_finite("grad_x_F", self._grad_x_F(x, y, b.indices))

    def grad_y_F(self, x, y, batch) -> np.ndarray:
        b = _as_batch(batch)
        self.counters.gc_f += b.size
        return check_finite("grad_y_F", self._grad_y_F(x, y, b.indices))

    def grad_y_G(self, x, y, batch) -> np.ndarray:
        b = _as_batch(batch)
        self.counters.gc_g += b.size
        return check_finite("grad_y_G", self._grad_y_G(x, y, b.indices))

    def hvp_yy_G(self, x, y, v, batch) -> np.ndarray:
        """Hessian-vector product  d2_yy G(x, y; batch) @ v."""
        b = _as_batch(batch)
        self.counters.hv_g += b.size
        return check_finite("hvp_yy_G", self._hvp_yy_G(x, y, v, b.indices))

    def jvp_xy_G(self, x, y, v, batch) -> np.ndarray:
        """Jacobian-vector product  d_x d_y G(x, y; batch) @ v  (a p-vector)."""
        b = _as_batch(batch)
        self.counters.jv_g += b.size
        return check_finite("jvp_xy_G", self._jvp_xy_G(x, y, v, b.indices))

    # -- counters -----------------------------------------------------------
    def counters_snapshot(self) -> ComplexityCounters:
        return self.counters.copy()

    def counters_reset(self) -> None:
        self.counters.reset()

    # -- to implement ---------------------------------------------------------
    @abc.abstractmethod
    def _grad_x_F(self, x, y, idx) -> np.ndarray: ...

    @abc.abstractmethod
    def _grad_y_F(self, x, y, idx) -> np.ndarray: ...

    @abc.abstractmethod
    def _grad_y_G(self, x, y, idx) -> np.ndarray: ...

    @abc.abstractmethod
    def _hvp_yy_G(self, x, y, v, idx) -> np.ndarray: ...

    @abc.abstractmethod
    def _jvp_xy_G(self, x, y, v, idx) -> np.ndarray: ...

    # -- uncounted evaluation used for traces ---------------------------------
    def phi(self, x) -> float:
        """Upper-level value f(x, y*(x)); not counted."""
        raise NotImplementedError

    def grad_phi(self, x) -> np.ndarray:
        """Hypergradient of phi at x; not counted."""
        raise NotImplementedError

    # full-batch conveniences (counted like any other call)
    def full_upper(self) -> BatchSpec:
        return BatchSpec.full(self.n_upper)

    def full_lower(self) -> BatchSpec:
        return BatchSpec.full(self.n_lower)


def counters_snapshot(oracle: BilevelOracle) -> ComplexityCounters:
    return oracle.counters_snapshot()


def counters_reset(oracle: BilevelOracle) -> None:
    oracle.counters_reset()
