"""Sharp tail-probability and density estimates from rate function and prefactor."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import AssumptionViolation, ConfigError, NonConvergenceError
from .spectrum import DeterminantEstimate, SpectrumResult, fredholm_determinant

log = logging.getLogger(__name__)

__all__ = ["prefactor_fredholm", "tail_probability", "log_tail_probability", "pdf_estimate",
           "log_pdf_estimate", "finite_dim_sorm", "SormResult", "DiscreteObservableMap", "EstimateReport",
           "build_report"]

LN10 = np.log(10.0)


def prefactor_fredholm(instanton, sr, truncation_tol: float = 1e-6, plateau_tol: float = 1e-3,
                       require_plateau: bool = True) -> float:
    """``C_F = [2 I_F det(Id - A_z)]^(-1/2)``.

    ``sr`` may be a SpectrumResult or a DeterminantEstimate. An unconverged
    plateau raises NonConvergenceError unless ``require_plateau`` is False.
    """
    de = sr if isinstance(sr, DeterminantEstimate) else fredholm_determinant(sr, truncation_tol, plateau_tol)
    if require_plateau and not de.plateau_converged:
        raise NonConvergenceError(
            f"determinant plateau not reached (relative change {de.plateau_change:.3e})", de)
    I_F = float(instanton.rate if hasattr(instanton, "rate") else instanton)
    if not I_F > 0:
        raise AssumptionViolation(f"rate function must be positive, got {I_F:.6g}")
    if not de.det > 0:
        raise AssumptionViolation(f"nonpositive Fredholm determinant {de.det:.6g}")
    return float((2.0 * I_F * de.det) ** -0.5)


def log_tail_probability(I_F, C_F, eps):
    """Natural log of ``sqrt(eps / 2 pi) C_F exp(-I_F / eps)``."""
    eps = np.asarray(eps, dtype=float)
    if np.any(eps <= 0):
        raise ConfigError("eps must be positive")
    return 0.5 * np.log(eps) - 0.5 * np.log(2 * np.pi) + np.log(C_F) - I_F / eps


def tail_probability(I_F, C_F, eps, log10: bool = False):
    """Sharp estimate of ``P(F >= z)``; with ``log10`` its base-10 logarithm."""
    lp = log_tail_probability(I_F, C_F, eps)
    return lp / LN10 if log10 else np.exp(lp)


def log_pdf_estimate(I_F, lam, C_F, eps):
    eps = np.asarray(eps, dtype=float)
    if np.any(eps <= 0):
        raise ConfigError("eps must be positive")
    with np.errstate(divide="ignore"):
        return -0.5 * np.log(2 * np.pi * eps) + np.log(abs(lam)) + np.log(C_F) - I_F / eps


def pdf_estimate(I_F, lam, C_F, eps):
    """Density estimate ``(2 pi eps)^(-1/2) |lam| C_F exp(-I_F / eps)``; zero at ``lam = 0``."""
    return np.exp(log_pdf_estimate(I_F, lam, C_F, eps))


# ---- finite-dimensional oracle ---------------------------------------------

@dataclass
class SormResult:
    I_F: float
    C_F: float
    tail: float
    lam: float
    x: np.ndarray
    det: float
    eigenvalues: np.ndarray
    kkt_residual: float


def finite_dim_sorm(F: Callable, grad: Callable, hess: Callable, z: float, eps, x0=None,
                    newton_iters: int = 20, tol: float = 1e-13) -> SormResult:
    """Second-order reliability estimate for ``P(F(X) >= z)``, ``X ~ N(0, eps I)``.

    The design point minimizes ``|x|^2 / 2`` subject to ``F(x) = z`` (SLSQP
    followed by Newton iterations on the KKT system). The prefactor uses the
    dense spectrum of ``lam P Hess F P``.
    """
    if x0 is None:
        raise ConfigError("a starting point x0 is required")
    x = np.array(x0, dtype=float)
    N = x.size
    if N == 1:
        sol = x
    else:
        res = minimize(lambda u: 0.5 * u @ u, x, jac=lambda u: u, method="SLSQP",
                       constraints=[{"type": "eq", "fun": lambda u: F(u) - z, "jac": grad}],
                       options={"ftol": 1e-14, "maxiter": 500})
        sol = res.x
    x = sol
    g = grad(x)
    lam = float(x @ g / (g @ g))
    kkt = np.inf
    for _ in range(newton_iters):
        g = grad(x)
        H = hess(x)
        r1 = x - lam * g
        r2 = F(x) - z
        kkt = max(np.linalg.norm(r1), abs(r2))
        if kkt <= tol * max(1.0, np.linalg.norm(x)):
            break
        K = np.zeros((N + 1, N + 1))
        K[:N, :N] = np.eye(N) - lam * H
        K[:N, N] = -g
        K[N, :N] = g
        step = np.linalg.solve(K, -np.concatenate([r1, [r2]]))
        x = x + step[:N]
        lam = lam + step[N]
    g = grad(x)
    H = hess(x)
    n = g / np.linalg.norm(g)
    P = np.eye(N) - np.outer(n, n)
    A = lam * (P @ H @ P)
    mu = np.linalg.eigvalsh(0.5 * (A + A.T))
    # the projector leaves one zero eigenvalue along n; 1 - 0 does not affect the product
    if np.any(mu >= 1.0):
        raise AssumptionViolation(f"projected Hessian violates the second-order condition (mu={mu.max():.4g})")
    det = float(np.prod(1.0 - mu))
    I_F = 0.5 * float(x @ x)
    C_F = (2.0 * I_F * det) ** -0.5
    return SormResult(I_F, C_F, tail_probability(I_F, C_F, eps), lam, x, det,
                      mu[np.argsort(-np.abs(mu))], float(kkt))


# ---- report ------------------------------------------------------------

@dataclass
class EstimateReport:
    z: float
    eps: np.ndarray
    I_F: float
    lam: float
    C_F_fredholm: float
    C_F_riccati: Optional[float]
    tail_prob: np.ndarray
    log10_tail_prob: np.ndarray
    pdf: np.ndarray
    k_used: int
    plateau_converged: bool
    plateau_change: float
    det: float
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "z": self.z, "eps": self.eps.tolist(), "I_F": self.I_F, "lambda": self.lam,
            "C_F_fredholm": self.C_F_fredholm, "C_F_riccati": self.C_F_riccati,
            "tail_prob": self.tail_prob.tolist(), "log10_tail_prob": self.log10_tail_prob.tolist(),
            "pdf": self.pdf.tolist(), "det": self.det, "k_used": self.k_used,
            "plateau_converged": self.plateau_converged, "plateau_change": self.plateau_change,
            **self.extra,
        }


def build_report(instanton, sr: SpectrumResult, eps: Sequence[float], C_F_riccati: Optional[float] = None,
                 require_plateau: bool = False, **kw) -> EstimateReport:
    """Collect the headline numbers; the plateau diagnostic is always carried along."""
    de = fredholm_determinant(sr, kw.get("truncation_tol", 1e-6), kw.get("plateau_tol", 1e-3))
    if not de.plateau_converged:
        log.warning("determinant plateau not reached (change %.3e); prefactor is provisional",
                    de.plateau_change)
    C = prefactor_fredholm(instanton, de, require_plateau=require_plateau)
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    I_F = float(instanton.rate)
    return EstimateReport(
        z=float(instanton.z), eps=eps, I_F=I_F, lam=float(instanton.lam), C_F_fredholm=C,
        C_F_riccati=None if C_F_riccati is None else float(C_F_riccati),
        tail_prob=np.atleast_1d(tail_probability(I_F, C, eps)),
        log10_tail_prob=np.atleast_1d(tail_probability(I_F, C, eps, log10=True)),
        pdf=np.atleast_1d(pdf_estimate(I_F, instanton.lam, C, eps)),
        k_used=de.k_used, plateau_converged=de.plateau_converged, plateau_change=de.plateau_change,
        det=de.det,
    )


class DiscreteObservableMap:
    """The discrete map ``u -> f(phi_T)`` in standardized noise coordinates.

    ``u = W^(1/2) eta`` on nodes of positive quadrature weight, so the
    discrete action is ``|u|^2 / 2`` and ``finite_dim_sorm`` applies directly.
    Dense Hessians cost one tangent and one second-order adjoint sweep per
    column; intended for small grids.
    """

    def __init__(self, spec, grid, cfg):
        from .core import Path
        self._Path = Path
        self.spec, self.grid, self.cfg = spec, grid, cfg
        w = grid.weights
        self.active = w > 0
        self.sqrt_w = np.sqrt(w[self.active])
        self.r = spec.noise_rank
        self.dim = int(self.active.sum()) * self.r

    def from_std(self, u):
        v = np.zeros((self.grid.n_t + 1, self.r))
        v[self.active] = np.reshape(u, (-1, self.r)) / self.sqrt_w[:, None]
        return self._Path(self.grid, v)

    def to_std(self, p):
        v = p.values if hasattr(p, "values") else p
        return (v[self.active] * self.sqrt_w[:, None]).reshape(-1)

    def F(self, u):
        from .propagators import solve_state
        return float(self.spec.observable(solve_state(self.spec, self.from_std(u), self.cfg).values[-1]))

    def grad(self, u):
        from .propagators import objective_and_gradient
        return self.to_std(objective_and_gradient(self.spec, self.from_std(u), 1.0, self.cfg)[3])

    def hess(self, u):
        from .propagators import hessian_apply, solve_state
        eta = self.from_std(u)
        phi = solve_state(self.spec, eta, self.cfg)
        H = np.empty((self.dim, self.dim))
        e = np.zeros(self.dim)
        for j in range(self.dim):
            e[j] = 1.0
            H[:, j] = self.to_std(hessian_apply(self.spec, phi, eta, 1.0, self.from_std(e), self.cfg))
            e[j] = 0.0
        return 0.5 * (H + H.T)
