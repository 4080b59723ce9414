"""Data hyper-cleaning on synthetic Gaussian blobs.

Lower level: a linear softmax classifier W (C x d, flattened row-major
into y) trained on the corrupted training set with per-sample weights
sigma(x_i):

    g(x, y) = mean_i sigma(x_i) CE(W u_i, v_i) + c ||y||^2

Upper level: unweighted cross-entropy on the clean validation set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import expit, log_softmax, softmax

from .core import BilevelOracle, InvalidArgumentError, InvalidStateError, RngStream


@dataclass(frozen=True, eq=False)
class HypercleanProblem:
    u_tr: np.ndarray
    v_tr: np.ndarray
    u_val: np.ndarray
    v_val: np.ndarray
    u_test: np.ndarray
    v_test: np.ndarray
    n_classes: int
    mask: np.ndarray
    corruption_prob: float = 0.3
    c: float = 0.001
    clean_tr: np.ndarray | None = None

    def __post_init__(self):
        if not self.c > 0:
            raise InvalidArgumentError(f"c must be positive, got {self.c}")
        if self.n_classes < 1:
            raise InvalidArgumentError("n_classes must be >= 1")
        if len(self.u_tr) == 0 or len(self.u_val) == 0:
            raise InvalidArgumentError("train and val sets must be non-empty")
        if self.mask.shape != (len(self.u_tr),):
            raise InvalidArgumentError("mask must have one entry per training sample")
        for v in (self.v_tr, self.v_val, self.v_test):
            if v.size and (v.min() < 0 or v.max() >= self.n_classes):
                raise InvalidArgumentError("labels must lie in 0..C-1")

    @property
    def d(self) -> int:
        return self.u_tr.shape[1]

    @property
    def n_tr(self) -> int:
        return len(self.u_tr)

    @property
    def dim_y(self) -> int:
        return self.n_classes * self.d

    def to_dict(self) -> dict:
        out = {"kind": "hyperclean", "n_classes": self.n_classes,
               "corruption_prob": self.corruption_prob, "c": self.c,
               "mask": self.mask.astype(int).tolist()}
        for name in ("u_tr", "v_tr", "u_val", "v_val", "u_test", "v_test"):
            out[name] = getattr(self, name).tolist()
        out["clean_tr"] = None if self.clean_tr is None else self.clean_tr.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HypercleanProblem":
        if d.get("kind") != "hyperclean":
            raise InvalidArgumentError("not a hyperclean problem document")
        feats = {k: np.asarray(d[k], dtype=float).reshape(len(d[k]), -1)
                 for k in ("u_tr", "u_val", "u_test")}
        labels = {k: np.asarray(d[k], dtype=np.int64) for k in ("v_tr", "v_val", "v_test")}
        if feats["u_test"].size == 0:
            feats["u_test"] = np.zeros((0, feats["u_tr"].shape[1]))
        clean = d.get("clean_tr")
        return cls(**feats, **labels, n_classes=int(d["n_classes"]),
                   mask=np.asarray(d["mask"], dtype=bool),
                   corruption_prob=float(d["corruption_prob"]), c=float(d["c"]),
                   clean_tr=None if clean is None else np.asarray(clean, dtype=np.int64))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "HypercleanProblem":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_blobs(
    rng: RngStream,
    n_tr: int,
    n_val: int,
    d: int,
    C: int,
    corruption_prob: float = 0.3,
    n_test: int | None = None,
    separation: float = 1.5,
    c: float = 0.001,
) -> HypercleanProblem:
    """Gaussian blobs around C random centroids (scale ``separation``), unit noise.

    Each training label is independently replaced by a uniform random
    label with probability ``corruption_prob``; ``mask`` marks the
    replaced ones (a replacement may coincide with the clean label).
    Validation and test labels are clean. ``n_test`` defaults to n_val.
    """
    n_test = n_val if n_test is None else n_test
    for name, val in (("n_tr", n_tr), ("n_val", n_val), ("d", d), ("C", C)):
        if int(val) != val or val < 1:
            raise InvalidArgumentError(f"{name} must be an integer >= 1, got {val}")
    if n_test < 0:
        raise InvalidArgumentError("n_test must be >= 0")
    if not 0.0 <= corruption_prob <= 1.0:
        raise InvalidArgumentError(f"corruption_prob must lie in [0, 1], got {corruption_prob}")
    gen = rng.generator
    centroids = gen.normal(0.0, separation, size=(C, d))

    def draw(n):
        labels = gen.integers(0, C, size=n)
        return centroids[labels] + gen.normal(size=(n, d)), labels

    u_tr, clean = draw(n_tr)
    mask = gen.random(n_tr) < corruption_prob
    noisy = np.where(mask, gen.integers(0, C, size=n_tr), clean)
    u_val, v_val = draw(n_val)
    u_test, v_test = draw(n_test)
    return HypercleanProblem(u_tr, noisy, u_val, v_val, u_test, v_test, C, mask,
                             corruption_prob, c, clean_tr=clean)


def _softmax_hvp(p: np.ndarray, s: np.ndarray) -> np.ndarray:
    # rows: (diag(p) - p p') s
    return p * s - p * np.sum(p * s, axis=1, keepdims=True)


class HypercleanOracle(BilevelOracle):
    """Per-sample derivative products of the hyper-cleaning problem.

    x holds one weight logit per training sample, y the flattened W.
    ``phi`` and ``grad_phi`` use a full-batch proxy: the lower level is
    solved by L-BFGS (at most ``ll_iters`` iterations) and the linear
    system directly; neither touches the counters.
    """

    def __init__(self, problem: HypercleanProblem, ll_iters: int = 200):
        super().__init__()
        self.problem = problem
        self.dim_x = problem.n_tr
        self.dim_y = problem.dim_y
        self.n_upper = len(problem.u_val)
        self.n_lower = problem.n_tr
        self.ll_iters = ll_iters
        self._cache_key = None
        self._cache = None

    # -- helpers --------------------------------------------------------------
    def _W(self, y):
        return np.asarray(y, dtype=float).reshape(self.problem.n_classes, self.problem.d)

    def _probs(self, y, u):
        return softmax(u @ self._W(y).T, axis=1)

    def _ce_grads(self, y, u, labels):
        """Per-sample (p - e_label) rows and their probability matrix."""
        p = self._probs(y, u)
        r = p.copy()
        r[np.arange(len(labels)), labels] -= 1.0
        return r, p

    # -- upper level ------------------------------------------------------------
    def _grad_x_F(self, x, y, idx):
        return np.zeros(self.dim_x)

    def _grad_y_F(self, x, y, idx):
        u = self.problem.u_val[idx]
        r, _ = self._ce_grads(y, u, self.problem.v_val[idx])
        return (r.T @ u).ravel() / len(idx)

    # -- lower level ------------------------------------------------------------
    def _grad_y_G(self, x, y, idx):
        u = self.problem.u_tr[idx]
        r, _ = self._ce_grads(y, u, self.problem.v_tr[idx])
        w = expit(np.asarray(x)[idx])
        return ((w[:, None] * r).T @ u).ravel() / len(idx) + 2 * self.problem.c * np.asarray(y)

    def _hvp_yy_G(self, x, y, v, idx):
        u = self.problem.u_tr[idx]
        p = self._probs(y, u)
        s = u @ self._W(v).T
        hs = _softmax_hvp(p, s) * expit(np.asarray(x)[idx])[:, None]
        return (hs.T @ u).ravel() / len(idx) + 2 * self.problem.c * np.asarray(v)

    def _jvp_xy_G(self, x, y, v, idx):
        u = self.problem.u_tr[idx]
        r, _ = self._ce_grads(y, u, self.problem.v_tr[idx])
        xi = np.asarray(x)[idx]
        sp = expit(xi) * (1 - expit(xi))
        # (grad_y L_i)' v = sum_c r_ic (W_v u_i)_c
        vals = sp * np.sum(r * (u @ self._W(v).T), axis=1) / len(idx)
        out = np.zeros(self.dim_x)
        np.add.at(out, idx, vals)
        return out

    def grad_x_G(self, x, y, batch) -> np.ndarray:
        """grad_x G(x, y; batch); counted as a lower-level gradient."""
        from .core import _as_batch

        b = _as_batch(batch)
        self.counters.gc_g += b.size
        idx = b.indices
        u = self.problem.u_tr[idx]
        losses = -log_softmax(u @ self._W(y).T, axis=1)[np.arange(len(idx)), self.problem.v_tr[idx]]
        xi = np.asarray(x)[idx]
        out = np.zeros(self.dim_x)
        np.add.at(out, idx, expit(xi) * (1 - expit(xi)) * losses / len(idx))
        return out

    # -- full-batch proxies (uncounted) ---------------------------------------------
    def g_value(self, x, y) -> float:
        pr = self.problem
        losses = -log_softmax(pr.u_tr @ self._W(y).T, axis=1)[np.arange(pr.n_tr), pr.v_tr]
        return float(np.mean(expit(np.asarray(x)) * losses) + pr.c * np.sum(np.asarray(y) ** 2))

    def f_value(self, x, y) -> float:
        pr = self.problem
        lp = log_softmax(pr.u_val @ self._W(y).T, axis=1)
        return float(-np.mean(lp[np.arange(len(pr.v_val)), pr.v_val]))

    def ll_solution(self, x, y0=None) -> np.ndarray:
        """Approximate argmin_y g(x, y) by L-BFGS; uncounted."""
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        if self._cache_key == key:
            return self._cache
        all_idx = np.arange(self.problem.n_tr)

        def fun(y):
            return self.g_value(x, y), self._grad_y_G(x, y, all_idx)

        start = np.zeros(self.dim_y) if y0 is None else np.asarray(y0, dtype=float)
        res = optimize.minimize(fun, start, jac=True, method="L-BFGS-B",
                                options={"maxiter": self.ll_iters, "gtol": 1e-10, "ftol": 1e-15})
        self._cache_key, self._cache = key, res.x
        return res.x

    def ll_hessian(self, x, y) -> np.ndarray:
        """Dense full-batch lower-level Hessian (dim_y x dim_y)."""
        all_idx = np.arange(self.problem.n_tr)
        eye = np.eye(self.dim_y)
        return np.column_stack([self._hvp_yy_G(x, y, e, all_idx) for e in eye])

    def phi(self, x) -> float:
        return self.f_value(x, self.ll_solution(x))

    def grad_phi(self, x) -> np.ndarray:
        y = self.ll_solution(x)
        v = np.linalg.solve(self.ll_hessian(x, y), self._grad_y_F(x, y, np.arange(self.n_upper)))
        return -self._jvp_xy_G(x, y, v, np.arange(self.n_lower))


def hyperclean_oracle(problem: HypercleanProblem, ll_iters: int = 200) -> HypercleanOracle:
    return HypercleanOracle(problem, ll_iters)


def _predict(problem: HypercleanProblem, y) -> np.ndarray:
    W = np.asarray(y, dtype=float).reshape(problem.n_classes, problem.d)
    # argmax returns the first maximizer, so ties go to the lowest class index
    return np.argmax(problem.u_test @ W.T, axis=1)


def eval_metrics(problem: HypercleanProblem, x, y) -> tuple[float, float]:
    """Test accuracy and macro-averaged F1 of the linear classifier y.

    ``x`` is accepted for symmetry with the other metrics and ignored.
    """
    if len(problem.v_test) == 0:
        raise InvalidStateError("no test set to evaluate on")
    pred = _predict(problem, y)
    truth = problem.v_test
    acc = float(np.mean(pred == truth))
    f1s = []
    for k in range(problem.n_classes):
        tp = np.sum((pred == k) & (truth == k))
        fp = np.sum((pred == k) & (truth != k))
        fn = np.sum((pred != k) & (truth == k))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if tp == 0 else 2 * tp / denom)
    return acc, float(np.mean(f1s))
