"""Quadratic bilevel test problem with closed-form lower-level solution.

    f(x, y) = mean_val 1/2 (y.u_i - v_i)^2 + ||x||^3
    g(x, y) = mean_tr  1/2 (y.u_i - v_i)^2 + r/2 ||y - x||^2

so that y*(x) = (A_tr + r I)^{-1} (b_tr + r x).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .core import BilevelOracle, InvalidArgumentError, InvalidStateError, RngStream


@dataclass(frozen=True, eq=False)
class SyntheticProblem:
    u_tr: np.ndarray
    v_tr: np.ndarray
    u_val: np.ndarray
    v_val: np.ndarray
    r: float = 0.5
    w0: np.ndarray | None = None
    A_tr: np.ndarray = field(init=False, repr=False)
    b_tr: np.ndarray = field(init=False, repr=False)
    A_val: np.ndarray = field(init=False, repr=False)
    b_val: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.r <= 0:
            raise InvalidArgumentError(f"r must be positive, got {self.r}")
        if self.u_tr.shape[1] != self.u_val.shape[1]:
            raise InvalidArgumentError("train/val feature dimensions differ")
        for name, (u, v) in {"tr": (self.u_tr, self.v_tr),
                             "val": (self.u_val, self.v_val)}.items():
            if len(u) == 0:
                raise InvalidArgumentError(f"empty {name} set")
            object.__setattr__(self, f"A_{name}", u.T @ u / len(u))
            object.__setattr__(self, f"b_{name}", u.T @ v / len(u))
        # spd factor of the lower-level Hessian, shared by y_star / grad_phi_true
        try:
            chol = linalg.cho_factor(self.A_tr + self.r * np.eye(self.dim))
        except linalg.LinAlgError as exc:
            raise InvalidStateError("A_tr + r I is not positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.u_tr.shape[1]

    @property
    def n_tr(self) -> int:
        return len(self.u_tr)

    @property
    def n_val(self) -> int:
        return len(self.u_val)

    def solve_ll_hessian(self, rhs: np.ndarray) -> np.ndarray:
        """(A_tr + r I)^{-1} rhs."""
        return linalg.cho_solve(self._chol, rhs)

    def ll_condition_number(self) -> float:
        eig = np.linalg.eigvalsh(self.A_tr)
        return float((eig[-1] + self.r) / (eig[0] + self.r))

    # -- text serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "synthetic",
            "r": self.r,
            "w0": None if self.w0 is None else np.asarray(self.w0).tolist(),
            "u_tr": self.u_tr.tolist(),
            "v_tr": self.v_tr.tolist(),
            "u_val": self.u_val.tolist(),
            "v_val": self.v_val.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticProblem":
        if d.get("kind") != "synthetic":
            raise InvalidArgumentError("not a synthetic problem document")
        return cls(
            u_tr=np.asarray(d["u_tr"], dtype=float),
            v_tr=np.asarray(d["v_tr"], dtype=float),
            u_val=np.asarray(d["u_val"], dtype=float),
            v_val=np.asarray(d["v_val"], dtype=float),
            r=float(d["r"]),
            w0=None if d.get("w0") is None else np.asarray(d["w0"], dtype=float),
        )

    def dump(self, path) -> None:
        """Write the problem as JSON; matrices are row-major nested lists."""
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SyntheticProblem":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_dataset(
    rng: RngStream,
    w0,
    n_samples: int = 20000,
    r: float = 0.5,
    e_var: float = 0.01,
    noise_var: float = 1.0,
) -> SyntheticProblem:
    """Sample the regression data: u_i = (e_i, 1), v_i = w0.u_i + noise.

    The first half of the samples forms the training set, the second half
    the validation set.
    """
    w0 = np.asarray(w0, dtype=float)
    p = w0.size
    if p < 2:
        raise InvalidArgumentError(f"w0 must have dimension >= 2, got {p}")
    if n_samples < 2:
        raise InvalidArgumentError("need at least 2 samples")
    gen = rng.generator
    e = gen.normal(0.0, np.sqrt(e_var), size=(n_samples, p - 1))
    u = np.hstack([e, np.ones((n_samples, 1))])
    v = u @ w0 + gen.normal(0.0, np.sqrt(noise_var), size=n_samples)
    half = n_samples // 2
    return SyntheticProblem(u[:half], v[:half], u[half:], v[half:], r=r, w0=w0)


def y_star(problem: SyntheticProblem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return problem.solve_ll_hessian(problem.b_tr + problem.r * x)


def _cube_norm_grad(x: np.ndarray) -> np.ndarray:
    # gradient of ||x||^3; zero at the origin
    return 3.0 * np.linalg.norm(x) * x


def grad_phi_true(problem: SyntheticProblem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    ys = y_star(problem, x)
    inner = problem.A_val @ ys - problem.b_val
    return problem.r * problem.solve_ll_hessian(inner) + _cube_norm_grad(x)


def f_value(problem: SyntheticProblem, x, y) -> float:
    res = problem.u_val @ y - problem.v_val
    return float(0.5 * np.mean(res**2) + np.linalg.norm(x) ** 3)


def g_value(problem: SyntheticProblem, x, y) -> float:
    res = problem.u_tr @ y - problem.v_tr
    return float(0.5 * np.mean(res**2) + 0.5 * problem.r * np.sum((y - x) ** 2))


def phi_true(problem: SyntheticProblem, x) -> float:
    return f_value(problem, x, y_star(problem, x))


class SyntheticOracle(BilevelOracle):
    """Per-sample derivatives of the quadratic problem.

    The deterministic ||x||^3 term of f is attached to every upper-level
    sample, so batch means stay unbiased for grad_x f.
    """

    def __init__(self, problem: SyntheticProblem):
        super().__init__()
        self.problem = problem
        self.dim_x = self.dim_y = problem.dim
        self.n_upper = problem.n_val
        self.n_lower = problem.n_tr

    def _grad_x_F(self, x, y, idx):
        return _cube_norm_grad(np.asarray(x, dtype=float))

    def _grad_y_F(self, x, y, idx):
        u = self.problem.u_val[idx]
        res = u @ y - self.problem.v_val[idx]
        return u.T @ res / len(idx)

    def _grad_y_G(self, x, y, idx):
        u = self.problem.u_tr[idx]
        res = u @ y - self.problem.v_tr[idx]
        return u.T @ res / len(idx) + self.problem.r * (y - x)

    def _hvp_yy_G(self, x, y, v, idx):
        u = self.problem.u_tr[idx]
        return u.T @ (u @ v) / len(idx) + self.problem.r * v

    def _jvp_xy_G(self, x, y, v, idx):
        return -self.problem.r * np.asarray(v, dtype=float)

    def phi(self, x) -> float:
        return phi_true(self.problem, x)

    def grad_phi(self, x) -> np.ndarray:
        return grad_phi_true(self.problem, x)


def synthetic_oracle(problem: SyntheticProblem) -> SyntheticOracle:
    return SyntheticOracle(problem)
