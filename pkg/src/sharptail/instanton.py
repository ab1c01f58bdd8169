"""Instanton computation by an augmented Lagrangian method.

For fixed multiplier ``lam`` and penalty ``mu`` the subproblem minimizes

    J(eta) = 1/2 |eta|^2 - lam (F[eta] - z) + mu/2 (F[eta] - z)^2

over noise paths, where ``F[eta] = f(phi_T[eta])``. Its L2 gradient is
``eta - (lam - mu (F - z)) dF``, so each evaluation costs one forward and one
adjoint sweep. After every subproblem ``lam <- lam - mu (F - z)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, minres

from .core import Path, ProblemSpec, TimeGrid, l2_inner, l2_norm
from .errors import ConfigError, NonConvergenceError
from .propagators import (IntegratorConfig, Stepper, _backward, _forward, hessian_apply,
                          objective_and_gradient)

log = logging.getLogger(__name__)

__all__ = ["InstantonConfig", "InstantonResult", "solve_instanton", "rate_function_sweep", "make_grid"]

DEFAULT_RULE = {"euler_if": "left", "rk2_if": "trapezoid"}


def make_grid(T: float, n_t: int, scheme: str, rule: Optional[str] = None) -> TimeGrid:
    """Uniform grid whose quadrature matches the time-stepping scheme."""
    return TimeGrid.uniform(T, n_t, rule or DEFAULT_RULE[scheme])


@dataclass(frozen=True)
class InstantonConfig:
    """Settings of the augmented Lagrangian solve.

    ``grad_reduction`` gives the gradient-norm reduction required in
    intermediate subproblems (relative to their initial gradient) and in the
    final ones (relative to the initial gradient of the whole solve). After
    the augmented Lagrangian phase up to ``newton_steps`` Newton steps on the
    KKT system (matrix-free MINRES) reduce the relative stationarity residual
    below ``newton_tol``; 0 disables this. ``solver`` is
    ``"gd"`` (gradient descent with Armijo backtracking), ``"lbfgs"`` or
    ``"auto"`` (gradient descent when the state dimension is at most 10).
    The L2 gradient in noise coordinates is already the ``a^{-1}``-scaled
    descent direction; ``precondition=False`` descends along the nodal
    gradient instead, which differs on nonuniform grids.
    """

    z_target: float
    T: float = 1.0
    n_t: int = 2000
    scheme: str = "euler_if"
    rule: Optional[str] = None
    penalty_schedule: tuple = tuple(np.logspace(0.0, np.log10(300.0), 6))
    grad_reduction: tuple = (1e2, 1e6)
    max_iters: int = 20000
    armijo_c1: float = 1e-4
    armijo_backtrack: float = 0.5
    initial_step: float = 1.0
    precondition: bool = True
    solver: str = "lbfgs"
    lbfgs_memory: int = 4
    obs_tol: float = 1e-8
    extra_updates: int = 30
    n_starts: int = 1
    seed: int = 0
    init_scale: float = 1.0
    newton_steps: int = 3
    newton_tol: float = 1e-12

    def __post_init__(self):
        mus = np.asarray(self.penalty_schedule, dtype=float)
        if mus.size == 0 or np.any(mus <= 0) or np.any(np.diff(mus) < 0):
            raise ConfigError("penalty schedule must be positive and nondecreasing")
        object.__setattr__(self, "penalty_schedule", tuple(float(m) for m in mus))
        if min(self.grad_reduction) <= 1:
            raise ConfigError("gradient reduction factors must exceed 1")
        if self.solver not in ("auto", "gd", "lbfgs"):
            raise ConfigError(f"unknown inner solver {self.solver!r}")
        if not 0 < self.armijo_c1 < 1 or not 0 < self.armijo_backtrack < 1:
            raise ConfigError("invalid Armijo parameters")
        if self.n_starts < 1:
            raise ConfigError("n_starts must be at least 1")
        IntegratorConfig(self.scheme)

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.scheme)

    def grid(self) -> TimeGrid:
        return make_grid(self.T, self.n_t, self.scheme, self.rule)


@dataclass
class InstantonResult:
    """Minimizer bundle of the constrained problem."""

    z: float
    eta: Path
    phi: Path
    theta: Path
    lam: float
    rate: float
    obs_residual: float
    iters: int
    grad_norm_history: list
    integrator: IntegratorConfig
    converged: bool = True
    objective_history: list = field(default_factory=list)
    n_evals: int = 0

    @property
    def grid(self) -> TimeGrid:
        return self.eta.grid

    def rate_from_adjoint(self, spec: ProblemSpec) -> float:
        """``1/2 <theta, a theta>``, equal to the rate at a stationary point."""
        st = spec.sigma_adjoint(self.theta.values)
        return 0.5 * float(np.dot(self.grid.weights, np.einsum("ij,ij->i", st, st)))

    def stationarity_residual(self, spec: ProblemSpec) -> float:
        """``|eta - sigma^T theta| / |eta|`` in L2."""
        d = Path(self.grid, self.eta.values - spec.sigma_adjoint(self.theta.values))
        return l2_norm(d) / max(l2_norm(self.eta), 1e-300)


class _Subproblem:
    def __init__(self, spec, grid, integ, z, precondition):
        self.spec = spec
        self.grid = grid
        self.integ = integ
        self.z = z
        self.w = grid.weights
        self.precondition = precondition
        self.n_evals = 0
        self.stepper = Stepper(spec, grid, integ)

    def evaluate(self, eta, lam, mu):
        """Objective, gradient and observable at ``eta`` (one forward, one adjoint sweep)."""
        self.n_evals += 1
        st = self.stepper
        X = _forward(st, st.forcing(eta), eta)
        F = float(self.spec.observable(X[-1]))
        lam_eff = lam - mu * (F - self.z)
        dS, P = _backward(st, X, st.forcing(eta), st.terminal(X[-1], lam_eff), eta)
        theta = st.node_values(dS, P)
        J = 0.5 * self.inner(eta, eta) - lam * (F - self.z) + 0.5 * mu * (F - self.z) ** 2
        return J, eta - self.spec.sigma_adjoint(theta), F, X, theta

    def change(self, eta, eta_new, F, F_new, lam, mu):
        """``J(eta_new) - J(eta)`` in a form free of large cancellations."""
        dF = F_new - F
        return (0.5 * self.inner(eta_new - eta, eta_new + eta) - lam * dF
                + 0.5 * mu * dF * (F_new + F - 2.0 * self.z))

    def inner(self, a, b):
        return float(np.dot(self.w, np.einsum("ij,ij->i", a, b)))


def _minimize(sub: _Subproblem, eta, lam, mu, target_fn, cfg: InstantonConfig, use_lbfgs: bool,
              budget: int, history: list, objectives: list):
    """Inner minimization at fixed (lam, mu). Returns (eta, F, phi, theta, iters, converged).

    ``target_fn(g0)`` maps the initial gradient norm to the stopping threshold.
    """
    J, g, F, phi, theta = sub.evaluate(eta, lam, mu)
    gn0 = np.sqrt(max(sub.inner(g, g), 0.0))
    gn = gn0
    history.append(gn)
    objectives.append(J)
    target = target_fn(gn0)
    S, Y = [], []
    it = 0
    step = cfg.initial_step
    while gn > target and it < budget:
        if use_lbfgs and S:
            d = -_two_loop(sub, g, S, Y)
            if sub.inner(d, g) >= 0:
                S.clear()
                Y.clear()
                d = -g
        elif sub.precondition:
            d = -g
        else:
            # nodal (Euclidean) gradient, rescaled to unit mean weight
            d = -g * (sub.w / sub.w.mean())[:, None]
        slope = sub.inner(g, d)
        alpha = cfg.initial_step if use_lbfgs else step
        accepted = False
        for _ in range(60):
            eta_new = eta + alpha * d
            try:
                J_new, g_new, F_new, phi_new, theta_new = sub.evaluate(eta_new, lam, mu)
                ok = sub.change(eta, eta_new, F, F_new, lam, mu) <= cfg.armijo_c1 * alpha * slope
            except FloatingPointError:
                ok = False
            if ok:
                accepted = True
                break
            alpha *= cfg.armijo_backtrack
        it += 1
        if not accepted:
            if S:
                S.clear()
                Y.clear()
                continue
            log.warning("line search failed at |g|=%.3e", gn)
            break
        if use_lbfgs:
            s_vec = eta_new - eta
            y_vec = g_new - g
            sy = sub.inner(s_vec, y_vec)
            if sy > 1e-14 * np.sqrt(sub.inner(s_vec, s_vec) * sub.inner(y_vec, y_vec)):
                S.append(s_vec)
                Y.append(y_vec)
                if len(S) > cfg.lbfgs_memory:
                    S.pop(0)
                    Y.pop(0)
        else:
            # let gradient descent regrow its step after a success
            step = min(cfg.initial_step, alpha / cfg.armijo_backtrack)
        eta, J, g, F, phi, theta = eta_new, J_new, g_new, F_new, phi_new, theta_new
        gn = np.sqrt(max(sub.inner(g, g), 0.0))
        history.append(gn)
        objectives.append(J)
    return eta, F, phi, theta, it, gn <= target


def _two_loop(sub, g, S, Y):
    q = g.copy()
    alphas = []
    rhos = [1.0 / sub.inner(y, s) for s, y in zip(S, Y)]
    for s, y, rho in zip(reversed(S), reversed(Y), reversed(rhos)):
        a = rho * sub.inner(s, q)
        alphas.append(a)
        q -= a * y
    gamma = sub.inner(S[-1], Y[-1]) / sub.inner(Y[-1], Y[-1])
    r = gamma * q
    for s, y, rho, a in zip(S, Y, rhos, reversed(alphas)):
        b = rho * sub.inner(y, r)
        r += (a - b) * s
    return r


def _solve_from(spec, cfg: InstantonConfig, grid, eta0, lam0):
    integ = cfg.integrator
    sub = _Subproblem(spec, grid, integ, cfg.z_target, cfg.precondition)
    use_lbfgs = cfg.solver == "lbfgs" or (cfg.solver == "auto" and spec.state_dim > 10)
    eta = np.array(eta0, dtype=np.float64)
    lam = float(lam0)
    history, objectives = [], []
    iters = 0
    mus = list(cfg.penalty_schedule)
    converged = False
    F = phi = theta = None
    n_sched = len(mus)
    k = 0
    # tolerances are relative to the cold-start gradient (eta = 0, lam = 0), so a
    # warm start close to the solution does not tighten them
    zero = np.zeros_like(eta)
    g_ref = None
    if np.any(eta != 0) or lam != 0:
        g0 = sub.evaluate(zero, 0.0, mus[0])[1]
        g_ref = np.sqrt(max(sub.inner(g0, g0), 0.0)) or None
    while True:
        final = k >= n_sched - 1
        mu = mus[min(k, n_sched - 1)]

        def target_fn(g0, final=final):
            # the final tolerance is relative to the reference gradient
            nonlocal g_ref
            if g_ref is None:
                g_ref = g0
            floor = g_ref / cfg.grad_reduction[1]
            return floor if final else max(g0 / cfg.grad_reduction[0], floor)

        eta, F, phi, theta, it, sub_ok = _minimize(sub, eta, lam, mu, target_fn, cfg, use_lbfgs,
                                                  cfg.max_iters - iters, history, objectives)
        iters += it
        resid = F - cfg.z_target
        log.info("mu=%.4g lam=%.8g F=%.10g iters=%d", mu, lam, F, iters)
        lam = lam - mu * resid
        if final and sub_ok and abs(resid) <= cfg.obs_tol * max(1.0, abs(cfg.z_target)):
            converged = True
            break
        k += 1
        if iters >= cfg.max_iters or k >= n_sched + cfg.extra_updates:
            break
    # at a stationary point eta = (lam - mu (F - z)) dF, i.e. the updated multiplier
    eta_p = Path(grid, eta)
    rate = 0.5 * l2_inner(eta_p, eta_p)
    return InstantonResult(
        z=float(cfg.z_target), eta=eta_p, phi=Path(grid, phi), theta=Path(grid, theta), lam=float(lam), rate=float(rate),
        obs_residual=float(abs(F - cfg.z_target)), iters=iters, grad_norm_history=history,
        integrator=integ, converged=converged, objective_history=objectives, n_evals=sub.n_evals,
    ), sub


def solve_instanton(spec: ProblemSpec, cfg: InstantonConfig, eta0: Optional[Path] = None,
                    lam0: float = 0.0, strict: bool = False) -> InstantonResult:
    """Minimize ``1/2 |eta|^2`` subject to ``f(phi_T[eta]) = z``.

    Starts from ``eta0`` (default zero) and ``lam0``. With ``n_starts > 1``
    further random initial paths are tried and the smallest objective wins,
    ties within 1e-10 going to the first found. ``strict`` raises
    :class:`NonConvergenceError` instead of returning a flagged result.
    """
    grid = cfg.grid() if eta0 is None else eta0.grid
    starts = [np.zeros((grid.n_t + 1, spec.noise_rank)) if eta0 is None else eta0.values]
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.n_starts - 1):
        starts.append(cfg.init_scale * rng.standard_normal((grid.n_t + 1, spec.noise_rank)))
    best = None
    for e0 in starts:
        res, _ = _solve_from(spec, cfg, grid, e0, lam0)
        if cfg.newton_steps > 0 and res.converged:
            res = _newton_polish(spec, res, cfg)
        res = _finalize(spec, res)
        if best is None or (res.converged and not best.converged) or (
                res.converged == best.converged and res.rate < best.rate - 1e-10):
            best = res
    if strict and not best.converged:
        raise NonConvergenceError("instanton optimization did not converge", best)
    return best


def _kkt(spec, eta, lam, z, integ, std):
    F, phi, _, g = objective_and_gradient(spec, eta, 1.0, integ)
    u = std[0](eta.values)
    gs = std[0](g.values)
    r1 = u - lam * gs
    return F, phi, u, gs, r1, F - z


def _newton_polish(spec, res: InstantonResult, cfg: InstantonConfig) -> InstantonResult:
    """Newton steps on the first-order conditions ``eta = lam dF``, ``F = z``.

    Works in standardized coordinates ``u = W^(1/2) eta`` on nodes of
    positive weight. The bordered system is symmetric indefinite and solved
    with MINRES; a step is kept only if it lowers the KKT residual.
    """
    grid = res.grid
    integ = res.integrator
    w = grid.weights
    act = w > 0
    sw = np.sqrt(w[act])
    r = spec.noise_rank

    def to_std(v):
        return (v[act] * sw[:, None]).reshape(-1)

    def from_std(u, base=None):
        v = np.zeros((grid.n_t + 1, r)) if base is None else base.copy()
        v[act] = u.reshape(-1, r) / sw[:, None]
        return v

    std = (to_std, from_std)
    eta, lam, z = res.eta, res.lam, res.z
    F, phi, u, gs, r1, r2 = _kkt(spec, eta, lam, z, integ, std)
    norm = lambda a, b: np.hypot(np.linalg.norm(a), abs(b))  # noqa: E731
    kkt = norm(r1, r2)
    scale = max(np.linalg.norm(u), 1e-300)
    N = u.size
    for step in range(cfg.newton_steps):
        if np.linalg.norm(r1) <= cfg.newton_tol * scale and abs(r2) <= cfg.obs_tol * max(1.0, abs(z)):
            break

        def mv(x, eta=eta, phi=phi, lam=lam, gs=gs):
            du, dl = x[:N], x[N]
            Hd = to_std(hessian_apply(spec, phi, eta, lam, Path(grid, from_std(du)), integ).values)
            return np.concatenate([du - Hd - gs * dl, [-(gs @ du)]])

        A = LinearOperator((N + 1, N + 1), matvec=mv, dtype=np.float64)
        rhs = np.concatenate([-r1, [r2]])
        sol, info = minres(A, rhs, rtol=1e-13, maxiter=4 * N + 4)
        eta_new = Path(grid, from_std(u + sol[:N], eta.values))
        lam_new = lam + sol[N]
        out = _kkt(spec, eta_new, lam_new, z, integ, std)
        new = norm(out[4], out[5])
        log.info("newton step %d: kkt %.3e -> %.3e (minres info %d)", step, kkt, new, info)
        if not new < kkt:
            break
        eta, lam, kkt = eta_new, lam_new, new
        F, phi, u, gs, r1, r2 = out
    res.eta = eta
    res.lam = float(lam)
    res.rate = 0.5 * l2_inner(eta, eta)
    return res


def _finalize(spec, res: InstantonResult) -> InstantonResult:
    """Recompute phi and theta at the final eta with the converged multiplier."""
    Fv, phi, theta, _ = objective_and_gradient(spec, res.eta, res.lam, res.integrator)
    res.phi = phi
    res.theta = theta
    res.obs_residual = float(abs(Fv - res.z))
    return res


def rate_function_sweep(spec: ProblemSpec, z_values: Sequence[float], cfg: InstantonConfig,
                        warm_start: bool = True):
    """Instantons along sorted ``z_values`` with continuation in z.

    Returns ``(table, results)``: rows ``(z, I_F, lam_z)`` and the list of
    results (``None`` where a solve failed).
    """
    z_values = np.asarray(z_values, dtype=float)
    if np.any(np.diff(z_values) < 0):
        raise ConfigError("z values must be sorted")
    results = []
    rows = []
    eta_prev, lam_prev = None, 0.0
    for z in z_values:
        c = replace(cfg, z_target=float(z))
        try:
            r = solve_instanton(spec, c, eta_prev, lam_prev)
        except Exception as exc:  # keep sweeping
            log.warning("sweep: z=%g failed: %s", z, exc)
            results.append(None)
            rows.append((z, np.nan, np.nan))
            continue
        results.append(r)
        rows.append((z, r.rate, r.lam))
        if warm_start:
            eta_prev, lam_prev = r.eta, r.lam
    return np.array(rows), results
