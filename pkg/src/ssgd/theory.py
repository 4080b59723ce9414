"""Smoothness constants and theory-prescribed hyperparameters for SSGD."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import InvalidArgumentError, InvalidStateError, RngStream, UnsupportedProblemError
from .synthetic import SyntheticProblem, y_star


@dataclass(frozen=True)
class LipschitzProfile:
    """Problem constants: f is M-Lipschitz, grad f / grad g are L-Lipschitz,
    the cross Jacobian is tau-Lipschitz, the lower Hessian rho-Lipschitz and
    g is mu-strongly convex in y. Variances bound the per-sample oracles."""

    M: float
    L: float
    tau: float
    rho: float
    mu: float
    sigma_f2: float = 0.0
    sigma_g2: float = 0.0
    sigma_g1_2: float = 0.0
    sigma_g2_2: float = 0.0

    def __post_init__(self):
        for name in ("M", "L", "mu"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("tau", "rho", "sigma_f2", "sigma_g2", "sigma_g1_2", "sigma_g2_2"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")
        if self.mu > self.L:
            raise InvalidArgumentError(f"need mu <= L, got mu={self.mu}, L={self.L}")

    @property
    def kappa(self) -> float:
        return self.L / self.mu


def measure_profile(
    problem: SyntheticProblem,
    domain_radius: float,
    x_ref=None,
    n_samples: int = 10_000,
    rng: RngStream | None = None,
    y_radius: float | None = None,
) -> LipschitzProfile:
    """Constants of the quadratic problem over {||x|| <= R, ||y|| <= R_y}.

    ``y_radius`` defaults to ``domain_radius``.

    Variances are per-sample second moments at (x_ref, y*(x_ref)), taken
    exactly over the dataset when it has at most ``n_samples`` points and
    over ``n_samples`` sampled indices otherwise. Matrix variances use the
    Frobenius norm, an upper bound on the spectral one.
    """
    if not isinstance(problem, SyntheticProblem):
        raise UnsupportedProblemError("measure_profile needs a quadratic SyntheticProblem")
    R = float(domain_radius)
    R_y = R if y_radius is None else float(y_radius)
    if not (R > 0 and R_y > 0):
        raise InvalidArgumentError("domain radii must be positive")
    p, r = problem.dim, problem.r
    eig_tr = np.linalg.eigvalsh(problem.A_tr)
    eig_val = np.linalg.eigvalsh(problem.A_val)
    mu = eig_tr[0] + r
    # joint Hessian of g in (x, y): [[rI, -rI], [-rI, A_tr + rI]]
    hess_g = np.block([[r * np.eye(p), -r * np.eye(p)],
                       [-r * np.eye(p), problem.A_tr + r * np.eye(p)]])
    L_g = np.abs(np.linalg.eigvalsh(hess_g)).max()
    # Hessian of f is blockdiag(3||x||(I + xx'/||x||^2), A_val); the first block has norm 6||x||
    L_f = max(6 * R, eig_val[-1])
    L = float(max(L_g, L_f))
    grad_x_max = 3 * R**2
    grad_y_max = eig_val[-1] * R_y + np.linalg.norm(problem.b_val)
    M = float(math.hypot(grad_x_max, grad_y_max))

    x_ref = np.zeros(p) if x_ref is None else np.asarray(x_ref, dtype=float)
    y_ref = y_star(problem, x_ref)
    rng = rng or RngStream(0)

    def pick(n):
        return np.arange(n) if n <= n_samples else rng.generator.integers(0, n, n_samples)

    iv = pick(problem.n_val)
    uv = problem.u_val[iv]
    gy_f = (uv @ y_ref - problem.v_val[iv])[:, None] * uv
    full_f = problem.A_val @ y_ref - problem.b_val
    sigma_f2 = float(np.mean(np.sum((gy_f - full_f) ** 2, axis=1)))

    it = pick(problem.n_tr)
    ut = problem.u_tr[it]
    gy_g = (ut @ y_ref - problem.v_tr[it])[:, None] * ut
    full_g = problem.A_tr @ y_ref - problem.b_tr
    sigma_g2 = float(np.mean(np.sum((gy_g - full_g) ** 2, axis=1)))
    # per-sample Hessian deviation u u' - A_tr, Frobenius norm squared
    sq = np.sum(ut**2, axis=1)
    fro2 = sq**2 - 2 * np.einsum("ni,ij,nj->n", ut, problem.A_tr, ut) + np.sum(problem.A_tr**2)
    sigma_g2_2 = float(np.mean(fro2))

    return LipschitzProfile(M=M, L=L, tau=0.0, rho=0.0, mu=float(mu),
                            sigma_f2=sigma_f2, sigma_g2=sigma_g2,
                            sigma_g1_2=0.0, sigma_g2_2=sigma_g2_2)


def l_phi(profile: LipschitzProfile) -> float:
    """Lipschitz constant of the hypergradient."""
    M, L, tau, rho, mu = profile.M, profile.L, profile.tau, profile.rho, profile.mu
    return (L + (2 * L**2 + tau * M**2) / mu + (rho * L * M + L**3 + tau * M * L) / mu**2
            + rho * L**2 * M / mu**3)


@dataclass(frozen=True)
class TheoryParams:
    alpha: float
    beta: float
    eta: float
    r_v: float
    r_w: float
    rho_1: float
    rho_2: float
    L_31: float
    rho_y: float
    C_1: float
    C_bar1: float
    C_21: float
    C_22: float
    C_23: float
    C_24: float
    L_phi: float
    alpha_candidates: tuple[float, float, float]
    T_min: int | None = None
    J_min: int | None = None
    T_bound: float | None = None
    J_bound: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _rate_constants(profile, eta, r_w, J):
    M, L, mu, rho = profile.M, profile.L, profile.mu, profile.rho
    C_1 = M * rho / mu**2 + L / mu
    C_21 = (1 - eta * mu) ** J * (1 + r_w) ** 2
    C_22 = (1 + 1 / r_w) * (2 + 8 * L**2 / mu**2) * C_1**2
    C_23 = (1 + 1 / r_w) * C_1**2 * (5 + r_w)
    C_24 = (1 + 1 / r_w) * (9 + 8 * r_w) * C_1**2
    return C_1, C_21, C_22, C_23, C_24


def _require_positive(**values):
    for name, val in values.items():
        if not (val > 0 and math.isfinite(val)):
            raise InvalidStateError(f"{name} must be positive and finite, got {val}")


def theorem1_params(profile: LipschitzProfile, J: int = 1, rho2_scale: float = 1.0) -> TheoryParams:
    """Step sizes valid for any T, J >= 1 (rho_2 = rho2_scale * kappa^-4).

    C_21 depends on J; pass J=1 for the worst case over J.
    """
    if J < 1:
        raise InvalidArgumentError("J must be >= 1")
    M, L, mu, tau = profile.M, profile.L, profile.mu, profile.tau
    kappa = profile.kappa
    eta = 1 / (2 * L)
    beta = 3 / (2 * (L + mu))
    r_v = 2 * mu * L / (L**2 + mu**2)
    r_w = eta * mu / (7 * (2 - eta * mu))
    rho_y = 2 * beta * mu * L / (mu + L)
    rho_2 = rho2_scale * kappa**-4
    C_1, C_21, C_22, C_23, C_24 = _rate_constants(profile, eta, r_w, J)
    denom = rho_y * (1 + r_v) - r_v
    if not denom > 0:
        raise InvalidStateError(f"rho_y (1 + r_v) - r_v = {denom} <= 0; rho_1 undefined")
    rho_1 = 2 * rho_2 * ((1 + r_w) * C_23 + 2 * C_24) / denom
    Lp = l_phi(profile)
    L_31 = Lp / 2 + 2 * ((rho_1 + C_24 * rho_2) * (2 / r_v) * L**2 / mu**2 + (1 + r_w) * C_22 * rho_2)
    C_bar1 = L + M * tau / mu
    cands = (
        1 / (2 * L_31),
        rho_2 * eta * mu / (4 * L**2),
        ((1 + r_w) * C_23 + 2 * C_24) * rho_2 / C_bar1**2,
    )
    alpha = min(cands)
    _require_positive(alpha=alpha, rho_1=rho_1, rho_2=rho_2, L_31=L_31, r_w=r_w, r_v=r_v)
    return TheoryParams(alpha, beta, eta, r_v, r_w, rho_1, rho_2, L_31, rho_y, C_1, C_bar1,
                        C_21, C_22, C_23, C_24, Lp, cands)


def theorem2_params(profile: LipschitzProfile, rho2_scale: float = 1.0) -> TheoryParams:
    """Step sizes and minimum loop lengths T, J = O(kappa) (rho_2 = rho2_scale * kappa^-3)."""
    M, L, mu, tau = profile.M, profile.L, profile.mu, profile.tau
    kappa = profile.kappa
    r_v = r_w = 1.0
    eta = beta = 1 / (2 * L)
    rho_y = 2 * beta * mu * L / (mu + L)
    rho_2 = rho2_scale * kappa**-3
    C_1, _, C_22, C_23, C_24 = _rate_constants(profile, eta, r_w, 1)
    rho_1 = 2 * rho_2 * (1 + r_w) * C_23
    Lp = l_phi(profile)
    L_31 = Lp / 2 + 2 * (rho_1 / (4 * mu**2) * L**2 + rho_2 * (1 + r_w) * C_22)
    C_bar1 = L + M * tau / mu
    cands = (
        1 / (2 * L_31),
        rho_2 / (4 * L**2),
        0.5 * rho_2 * (1 + r_w) * C_23 / C_bar1**2,
    )
    alpha = min(cands)
    T_bound = math.log(rho_1 / (8 * (rho_1 + C_24 * rho_2))) / math.log(L / (mu + L))
    J_bound = math.log(1 / (4 * (1 + r_w) ** 2)) / math.log(1 - eta * mu)
    # bounds that are integers up to round-off should not round up
    T_min = max(1, math.ceil(T_bound - 1e-9))
    J_min = max(1, math.ceil(J_bound - 1e-9))
    C_21 = (1 - eta * mu) ** J_min * (1 + r_w) ** 2
    _require_positive(alpha=alpha, rho_1=rho_1, rho_2=rho_2, L_31=L_31)
    return TheoryParams(alpha, beta, eta, r_v, r_w, rho_1, rho_2, L_31, rho_y, C_1, C_bar1,
                        C_21, C_22, C_23, C_24, Lp, cands,
                        T_min=T_min, J_min=J_min, T_bound=T_bound, J_bound=J_bound)


def format_report(profile: LipschitzProfile, params: dict[str, TheoryParams]) -> str:
    """Labeled plain-text report of the constants, for run logs."""
    w = 16
    lines = ["# problem constants"]
    for key, val in asdict(profile).items():
        lines.append(f"{key:>{w}} = {val:.6g}")
    lines.append(f"{'kappa':>{w}} = {profile.kappa:.6g}")
    lines.append(f"{'L_phi':>{w}} = {l_phi(profile):.6g}")
    for name, prm in params.items():
        lines.append(f"# {name}")
        for key, val in prm.as_dict().items():
            if key == "alpha_candidates":
                val = ", ".join(f"{c:.6g}" for c in val)
                lines.append(f"{key:>{w}} = [{val}]")
            elif val is not None:
                text = f"{val:.6g}" if isinstance(val, float) else str(val)
                lines.append(f"{key:>{w}} = {text}")
    return "\n".join(lines) + "\n"
