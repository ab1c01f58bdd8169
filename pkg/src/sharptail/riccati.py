"""Prefactor and final-time covariance from a forward matrix Riccati equation.

Along the instanton, ``Q' = a + B Q + Q B^T + Q H Q`` with ``Q(0) = 0``,
``B = nabla b(phi_z)`` and ``H = <nabla^2 b(phi_z), theta_z>``. Time stepping
uses the same scheme family and integrating factor as the propagators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ProblemSpec
from .errors import AssumptionViolation, ConfigError, RiccatiSingularityError
from .instanton import InstantonResult

__all__ = ["RiccatiConfig", "RiccatiResult", "solve_riccati", "prefactor_riccati",
           "final_time_covariance_riccati"]


@dataclass(frozen=True)
class RiccatiConfig:
    """``max_dim`` caps the dense n x n storage; ``blowup`` is the norm at
    which integration aborts; ``cond_jump`` the factor by which the
    condition number of ``I - lam Hess f Q`` may grow in one step before the
    node is recorded as a suspected singularity."""

    max_dim: int = 4096
    blowup: float = 1e12
    cond_jump: float = 1e3
    store_path: bool = True
    scheme: str | None = None


@dataclass
class RiccatiResult:
    Q_T: np.ndarray
    trace_integral: float
    U: np.ndarray
    C_F: float
    lam: float
    grad_f: np.ndarray
    Q_path: np.ndarray | None = None
    singularity_events: list = field(default_factory=list)
    symmetry_defect: float = 0.0


class _Ops:
    """Matrix actions of the linearization along the instanton."""

    def __init__(self, spec: ProblemSpec, use_if: bool):
        self.spec = spec
        self.use_if = use_if and spec.linear is not None
        if self.use_if:
            self.J = spec.nonlinear_jac
        else:
            self.J = spec.jacobian_action
        self.H = spec.hessian_bilinear

    def rhs(self, Q, x, th, a):
        # rows of Q^T are acted on along the last axis; Q is symmetric
        BQ = self.J(x, Q.T).T
        HQ = self.H(x, th, Q.T).T
        return a + BQ + BQ.T + Q @ HQ

    def hq(self, Q, x, th):
        return self.H(x, th, Q.T).T

    def conj(self, Q, i, props):
        # E Q E^T for the integrating factor of step i
        if not self.use_if:
            return Q
        E = props[i][0]
        return E(E(Q).T).T


def solve_riccati(spec: ProblemSpec, inst: InstantonResult, cfg: RiccatiConfig = RiccatiConfig()) -> RiccatiResult:
    """Integrate the Riccati equation along ``inst`` and evaluate the prefactor.

    Raises ``RiccatiSingularityError`` when ``|Q|`` exceeds ``cfg.blowup`` or
    becomes non-finite. Suspected removable singularities (condition spikes
    of ``U(t) = I - lam Hess f Q(t)``) are recorded as ``(t, value)`` pairs.
    """
    n = spec.state_dim
    if n > cfg.max_dim:
        raise ConfigError(f"state dimension {n} exceeds the dense Riccati cap {cfg.max_dim}")
    grid = inst.grid
    scheme = cfg.scheme or inst.integrator.scheme
    heun = scheme == "rk2_if"
    ops = _Ops(spec, inst.integrator.integrating_factor)
    props = [spec.linear.propagator(h) for h in grid.steps] if ops.use_if else None
    X = inst.phi.values
    TH = inst.theta.values
    w = grid.weights
    a = spec.diffusion_matrix()
    Q = np.zeros((n, n))
    path = np.empty((grid.n_t + 1, n, n)) if cfg.store_path else None
    if path is not None:
        path[0] = Q
    lam = inst.lam
    K = spec.obs_hess_action(X[-1], np.eye(n)).T
    watch_u = bool(np.any(K != 0.0)) and lam != 0.0
    cond_prev = 1.0
    nq_prev = 0.0
    trace = 0.0
    events = []
    sym = 0.0
    for i in range(grid.n_t):
        h = grid.steps[i]
        if w[i] != 0.0:
            trace += w[i] * np.trace(ops.hq(Q, X[i], TH[i]))
        G = ops.rhs(Q, X[i], TH[i], a)
        if not heun:
            Qn = ops.conj(Q + h * G, i, props)
        else:
            Qs = ops.conj(Q + h * G, i, props)
            Gs = ops.rhs(Qs, X[i + 1], TH[i + 1], a)
            Qn = ops.conj(Q + (0.5 * h) * G, i, props) + (0.5 * h) * Gs
        nq = np.linalg.norm(Qn)
        if nq > 0:
            sym = max(sym, np.linalg.norm(Qn - Qn.T) / nq)
        Q = 0.5 * (Qn + Qn.T)
        if not np.all(np.isfinite(Q)) or nq > cfg.blowup:
            raise RiccatiSingularityError(i + 1, nq)
        # condition spike of U(t), or of the growth of Q when U is trivial
        if watch_u:
            c = np.linalg.cond(np.eye(n) - lam * (K @ Q))
            if c > cfg.cond_jump * cond_prev:
                events.append((float(grid.nodes[i + 1]), float(c)))
            cond_prev = c
        elif nq_prev > 0 and nq > cfg.cond_jump * nq_prev:
            events.append((float(grid.nodes[i + 1]), float(nq / nq_prev)))
        nq_prev = nq
        if path is not None:
            path[i + 1] = Q
    if w[-1] != 0.0:
        trace += w[-1] * np.trace(ops.hq(Q, X[-1], TH[-1]))
    gf = np.asarray(spec.obs_grad(X[-1]), dtype=float)
    U = np.eye(n) - lam * (K @ Q)
    rr = RiccatiResult(Q_T=Q, trace_integral=float(trace), U=U, C_F=np.nan, lam=lam, grad_f=gf,
                       Q_path=path, singularity_events=events, symmetry_defect=sym)
    rr.C_F = prefactor_riccati(rr, inst)
    return rr


def _qu(rr: RiccatiResult):
    try:
        cond = np.linalg.cond(rr.U)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise AssumptionViolation(f"U_z is singular (condition number {cond:.3e})")
    QU = rr.Q_T @ np.linalg.inv(rr.U)
    return 0.5 * (QU + QU.T)


def prefactor_riccati(rr: RiccatiResult, inst: InstantonResult) -> float:
    """``C_F = lam^-1 exp(tr/2) [det U <grad f, Q U^-1 grad f>]^(-1/2)``."""
    QU = _qu(rr)
    g = rr.grad_f
    bracket = np.linalg.det(rr.U) * float(g @ QU @ g)
    if not bracket > 0:
        raise AssumptionViolation(f"nonpositive Riccati bracket {bracket:.3e}")
    if rr.lam == 0:
        raise AssumptionViolation("zero multiplier: the prefactor is undefined at the mode")
    return float(np.exp(0.5 * rr.trace_integral) / (abs(rr.lam) * np.sqrt(bracket)))


def final_time_covariance_riccati(rr: RiccatiResult, inst: InstantonResult | None = None) -> np.ndarray:
    """Conditioned final-time fluctuation covariance ``C(T, T)``."""
    QU = _qu(rr)
    v = QU @ rr.grad_f
    d = float(rr.grad_f @ v)
    if not d > 0:
        raise AssumptionViolation("nonpositive quadratic form <grad f, Q U^-1 grad f>")
    C = QU - np.outer(v, v) / d
    return 0.5 * (C + C.T)
