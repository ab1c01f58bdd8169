"""Forward, adjoint and second-order sweeps with integrating factors.

Every backward sweep is the exact transpose of the discrete forward map
(discretize-then-optimize), so gradients and Hessian-vector products are
exact for the discrete objective. The noise path is piecewise given on the
nodes: an Euler step from node i uses the forcing at node i, a Heun step uses
the forcing at both ends of the interval.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np

from . import _backend
from .core import Path, ProblemSpec, TimeGrid
from .errors import CheckpointPlanError, ConfigError, DimensionError, DivergenceError

__all__ = [
    "IntegratorConfig",
    "CheckpointPlan",
    "solve_state",
    "solve_adjoint",
    "gradient",
    "objective_and_gradient",
    "solve_linearized_pair",
    "hessian_apply",
    "checkpointed_apply",
]

SCHEMES = ("euler_if", "rk2_if")


@dataclass(frozen=True)
class IntegratorConfig:
    """Time-stepping scheme.

    ``scheme`` is ``"euler_if"`` (explicit Euler) or ``"rk2_if"`` (Heun).
    With ``integrating_factor`` the linear part of the problem is integrated
    exactly; without it, or when the problem has no linear part, the scheme
    is the plain explicit one applied to the full drift.
    """

    scheme: str = "euler_if"
    integrating_factor: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    @property
    def heun(self) -> bool:
        return self.scheme == "rk2_if"


def _identity(v):
    return v


class Stepper:
    """Single-step maps of the discrete forward model and their derivatives.

    Shared by the direct and the checkpointed sweeps so both follow the
    same floating-point operation order.
    """

    def __init__(self, spec: ProblemSpec, grid: TimeGrid, cfg: IntegratorConfig):
        self.spec = spec
        self.grid = grid
        self.cfg = cfg
        self.h = grid.steps
        self.heun = cfg.heun
        use_if = cfg.integrating_factor and spec.linear is not None
        self.use_if = use_if
        if use_if:
            self.N = spec.nonlinear
            self.J = spec.nonlinear_jac
            self.JT = spec.nonlinear_jac_t
            self.E = [spec.linear.propagator(h) for h in self.h]
        else:
            self.N = spec.drift
            self.J = spec.jacobian_action
            self.JT = spec.jacobian_adjoint
            self.E = [(_identity, _identity)] * len(self.h)
        self.H = spec.hessian_bilinear
        self.native = None
        if spec.quadratic is not None:
            self.native = _backend.native()

    # native kernels take the problem coefficients as flat arrays
    def _qs_args(self):
        q = self.spec.quadratic
        return (q.linear_diag, q.quad_sym, q.sigma, np.ascontiguousarray(self.h),
                int(self.heun), int(self.cfg.integrating_factor))

    def forcing(self, eta: np.ndarray) -> np.ndarray:
        return self.spec.sigma_apply(eta)

    # ---- single steps -------------------------------------------------
    def step(self, i, x, s0, s1):
        h = self.h[i]
        E = self.E[i][0]
        if not self.heun:
            return E(x + h * (self.N(x) + s0))
        k1 = self.N(x) + s0
        y = E(x + h * k1)
        k2 = self.N(y) + s1
        return E(x + (0.5 * h) * k1) + (0.5 * h) * k2

    def step_tangent(self, i, x, s0, g, d0, d1):
        h = self.h[i]
        E = self.E[i][0]
        if not self.heun:
            return E(g + h * (self.J(x, g) + d0))
        k1 = self.J(x, g) + d0
        y = E(x + h * (self.N(x) + s0))
        yd = E(g + h * k1)
        k2 = self.J(y, yd) + d1
        return E(g + (0.5 * h) * k1) + (0.5 * h) * k2

    def step_adjoint(self, i, x, s0, p):
        """Return ``(p_i, a_i, a_{i+1})``: costate and forcing sensitivities."""
        h = self.h[i]
        Et = self.E[i][1]
        if not self.heun:
            q = Et(p)
            a1 = h * q
            return q + h * self.JT(x, q), a1, None
        y = self.E[i][0](x + h * (self.N(x) + s0))
        a2 = (0.5 * h) * p
        py = self.JT(y, a2)
        b = Et(p)
        c = Et(py)
        a1 = (0.5 * h) * b + h * c
        return b + c + self.JT(x, a1), a1, a2

    def step_second(self, i, x, s0, g, d0, p, r):
        """Backward step of the first and second-order adjoints together.

        Returns ``(p_i, r_i, a1, a2, b1, b2)`` where a* are first-order and
        b* second-order forcing sensitivities at nodes i and i+1.
        """
        h = self.h[i]
        Et = self.E[i][1]
        if not self.heun:
            q = Et(p)
            qr = Et(r)
            p_i = q + h * self.JT(x, q)
            r_i = qr + h * (self.JT(x, qr) + self.H(x, q, g))
            return p_i, r_i, h * q, None, h * qr, None
        E = self.E[i][0]
        k1 = self.N(x) + s0
        y = E(x + h * k1)
        yd = E(g + h * (self.J(x, g) + d0))
        a2 = (0.5 * h) * p
        b2 = (0.5 * h) * r
        py = self.JT(y, a2)
        pyd = self.JT(y, b2) + self.H(y, a2, yd)
        b = Et(p)
        c = Et(py)
        bd = Et(r)
        cd = Et(pyd)
        a1 = (0.5 * h) * b + h * c
        b1 = (0.5 * h) * bd + h * cd
        p_i = b + c + self.JT(x, a1)
        r_i = bd + cd + self.JT(x, b1) + self.H(x, a1, g)
        return p_i, r_i, a1, a2, b1, b2

    # ---- terminal conditions -------------------------------------------
    def terminal(self, xT, lam):
        return lam * self.spec.obs_grad(xT)

    def terminal_second(self, xT, gT, lam):
        return lam * self.spec.obs_hess_action(xT, gT)

    # ---- riesz map to node values ----------------------------------------
    def node_values(self, dS, P):
        """Divide forcing sensitivities by quadrature weights.

        Nodes without weight take the costate value itself; for Heun with
        the trapezoid rule the final node is set from the costate exactly.
        """
        w = self.grid.weights
        out = np.empty_like(dS)
        pos = w > 0
        out[pos] = dS[pos] / w[pos, None]
        out[~pos] = P[~pos]
        if self.heun and self.grid.rule == "trapezoid":
            out[-1] = P[-1]
        return out


# ---------------------------------------------------------------------------
# full sweeps


def _forward(st: Stepper, s: np.ndarray, eta: Optional[np.ndarray] = None) -> np.ndarray:
    n_t = st.grid.n_t
    if st.native is not None and eta is not None:
        X, bad = st.native.qs_forward(*st._qs_args(), st.spec.x0, np.ascontiguousarray(eta))
        if bad >= 0:
            raise DivergenceError(bad)
        return X
    X = np.empty((n_t + 1, st.spec.state_dim))
    x = np.array(st.spec.x0, dtype=np.float64)
    X[0] = x
    for i in range(n_t):
        x = st.step(i, x, s[i], s[i + 1])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(i + 1)
        X[i + 1] = x
    return X


def _backward(st: Stepper, X, s, pT, eta=None):
    n_t = st.grid.n_t
    if st.native is not None and eta is not None:
        return st.native.qs_adjoint(*st._qs_args(), X, np.ascontiguousarray(eta), np.ascontiguousarray(pT))
    n = st.spec.state_dim
    dS = np.zeros((n_t + 1, n))
    P = np.empty((n_t + 1, n))
    p = np.array(pT, dtype=np.float64)
    P[n_t] = p
    for i in range(n_t - 1, -1, -1):
        p, a1, a2 = st.step_adjoint(i, X[i], s[i], p)
        dS[i] += a1
        if a2 is not None:
            dS[i + 1] += a2
        P[i] = p
    if not np.all(np.isfinite(P)):
        raise DivergenceError(int(np.argmax(~np.isfinite(P).all(axis=1))), "adjoint")
    return dS, P


def _tangent(st: Stepper, X, s, ds, eta=None, deta=None):
    n_t = st.grid.n_t
    if st.native is not None and deta is not None:
        return st.native.qs_tangent(*st._qs_args(), X, np.ascontiguousarray(eta), np.ascontiguousarray(deta))
    G = np.empty_like(X)
    g = np.zeros(X.shape[1])
    G[0] = g
    for i in range(n_t):
        g = st.step_tangent(i, X[i], s[i], g, ds[i], ds[i + 1])
        G[i + 1] = g
    return G


def _backward_second(st: Stepper, X, G, s, ds, lam, eta=None, deta=None):
    n_t = st.grid.n_t
    pT = st.terminal(X[-1], lam)
    rT = st.terminal_second(X[-1], G[-1], lam)
    if st.native is not None and deta is not None:
        return st.native.qs_second(*st._qs_args(), X, np.ascontiguousarray(eta),
                                   np.ascontiguousarray(deta), G, pT, rT)
    dS2 = np.zeros_like(X)
    R = np.empty_like(X)
    p, r = pT, rT
    R[n_t] = r
    for i in range(n_t - 1, -1, -1):
        p, r, a1, a2, b1, b2 = st.step_second(i, X[i], s[i], G[i], ds[i], p, r)
        dS2[i] += b1
        if b2 is not None:
            dS2[i + 1] += b2
        R[i] = r
    return dS2, R


def _check_noise(spec: ProblemSpec, p: Path):
    if p.width != spec.noise_rank:
        raise DimensionError(f"noise path width {p.width} != noise rank {spec.noise_rank}")


# ---------------------------------------------------------------------------
# public operations


def solve_state(spec: ProblemSpec, eta: Path, cfg: IntegratorConfig = IntegratorConfig()) -> Path:
    """Integrate the controlled dynamics ``phi' = b(phi) + sigma eta``."""
    _check_noise(spec, eta)
    st = Stepper(spec, eta.grid, cfg)
    return Path(eta.grid, _forward(st, st.forcing(eta.values), eta.values))


def solve_adjoint(spec: ProblemSpec, phi: Path, lam: float, cfg: IntegratorConfig = IntegratorConfig(),
                  eta: Optional[Path] = None) -> Path:
    """Node values of the adjoint theta for the functional ``lam * f(phi(T))``.

    The Heun adjoint depends on the forcing, so ``eta`` is needed for
    ``rk2_if``; it defaults to zero (valid for Euler, where it is unused).
    """
    grid = phi.grid
    st = Stepper(spec, grid, cfg)
    ev = np.zeros((grid.n_t + 1, spec.noise_rank)) if eta is None else eta.values
    dS, P = _backward(st, phi.values, st.forcing(ev), st.terminal(phi.values[-1], lam), ev)
    return Path(grid, st.node_values(dS, P))


def objective_and_gradient(spec: ProblemSpec, eta: Path, lam: float, cfg: IntegratorConfig = IntegratorConfig()):
    """Return ``(f(phi(T)), phi, theta, grad)`` for ``lam * f(phi(T))``.

    ``grad`` is the L2 Riesz representative in noise coordinates, i.e. the
    path with ``<grad, d>_L2 = d/de lam f(phi_T[eta + e d])``.
    """
    _check_noise(spec, eta)
    st = Stepper(spec, eta.grid, cfg)
    s = st.forcing(eta.values)
    X = _forward(st, s, eta.values)
    dS, P = _backward(st, X, s, st.terminal(X[-1], lam), eta.values)
    theta = st.node_values(dS, P)
    grid = eta.grid
    return (float(spec.observable(X[-1])), Path(grid, X), Path(grid, theta),
            Path(grid, spec.sigma_adjoint(theta)))


def gradient(spec: ProblemSpec, eta: Path, lam: float, cfg: IntegratorConfig = IntegratorConfig()) -> Path:
    """L2 gradient of ``lam * f(phi_T[eta])`` in noise coordinates."""
    return objective_and_gradient(spec, eta, lam, cfg)[3]


def solve_linearized_pair(spec: ProblemSpec, phi: Path, eta: Path, lam: float, deta: Path,
                          cfg: IntegratorConfig = IntegratorConfig()):
    """Tangent state gamma and second-order adjoint zeta along ``deta``.

    ``sigma^T zeta`` is the Hessian of ``lam * f(phi_T[.])`` at ``eta``
    applied to ``deta``.
    """
    _check_noise(spec, eta)
    _check_noise(spec, deta)
    st = Stepper(spec, eta.grid, cfg)
    X = phi.values
    s = st.forcing(eta.values)
    ds = st.forcing(deta.values)
    G = _tangent(st, X, s, ds, eta.values, deta.values)
    dS2, R = _backward_second(st, X, G, s, ds, lam, eta.values, deta.values)
    return Path(eta.grid, G), Path(eta.grid, st.node_values(dS2, R))


def hessian_apply(spec: ProblemSpec, phi: Path, eta: Path, lam: float, deta: Path,
                  cfg: IntegratorConfig = IntegratorConfig()) -> Path:
    """``sigma^T zeta``: unprojected Hessian-vector product of ``lam F``."""
    _, zeta = solve_linearized_pair(spec, phi, eta, lam, deta, cfg)
    return Path(eta.grid, spec.sigma_adjoint(zeta.values))


# ---------------------------------------------------------------------------
# checkpointing


def _beta(s: int, r: int) -> int:
    return comb(s + r, s)


class CheckpointPlan:
    """Static binomial checkpointing schedule for a reverse sweep.

    Parameters
    ----------
    grid : TimeGrid
    budget : int, optional
        Maximum number of simultaneously stored full-state snapshots,
        including the initial state. Defaults to ``ceil(log2 n_t) + 1``.

    The schedule reverses ``n_t`` steps with snapshots placed by the
    classical binomial (revolve) rule, so that each step is recomputed at
    most ``r`` times with ``C(budget - 1 + r, r) >= n_t``.
    """

    def __init__(self, grid: TimeGrid, budget: Optional[int] = None):
        n = grid.n_t
        if budget is None:
            budget = int(np.ceil(np.log2(n))) + 1
        budget = int(budget)
        if budget < 2:
            raise CheckpointPlanError("checkpoint budget must be at least 2")
        self.grid = grid
        self.budget = budget
        actions = []
        self._live = 1
        self.peak_snapshots = 1
        if budget >= n + 1:  # store everything; no recomputation
            for i in range(1, n):
                actions.append(("advance", i - 1, i, True))
            self._live = self.peak_snapshots = n
            for i in range(n - 1, -1, -1):
                actions.append(("reverse", i))
                if i > 0:
                    actions.append(("free", i))
        else:
            self._build(0, n, budget - 1, actions)
        self.actions = tuple(actions)
        self.stored_indices = frozenset([0] + [a[2] for a in actions if a[0] == "advance" and a[3]])
        self.forward_steps = sum(a[2] - a[1] for a in actions if a[0] == "advance")
        del self._live

    def _build(self, i0, i1, s, out):
        l = i1 - i0
        if l == 1:
            out.append(("reverse", i0))
            return
        if s == 0:
            for j in range(i1 - 1, i0 - 1, -1):
                if j > i0:
                    out.append(("advance", i0, j, False))
                out.append(("reverse", j))
            return
        r = 1
        while _beta(s, r) < l:
            r += 1
        d = max(1, l - _beta(s - 1, r))
        mid = i0 + d
        out.append(("advance", i0, mid, True))
        self._live += 1
        self.peak_snapshots = max(self.peak_snapshots, self._live)
        self._build(mid, i1, s - 1, out)
        out.append(("free", mid))
        self._live -= 1
        self._build(i0, mid, s, out)

    def __repr__(self):
        return (f"CheckpointPlan(n_t={self.grid.n_t}, budget={self.budget}, "
                f"peak={self.peak_snapshots}, forward_steps={self.forward_steps})")


def run_reversed(plan: CheckpointPlan, state0, advance, reverse, stats: Optional[dict] = None):
    """Execute a reverse sweep under a checkpoint plan.

    ``advance(i, state) -> state_{i+1}`` must not mutate its input and
    ``reverse(i, state_i)`` is called for i = n_t-1, ..., 0 in order.
    """
    snaps = {0: state0}
    peak = 1
    nadv = 0
    for act in plan.actions:
        kind = act[0]
        if kind == "advance":
            _, i0, i1, store = act
            st = snaps[i0]
            for i in range(i0, i1):
                st = advance(i, st)
                nadv += 1
            if store:
                snaps[i1] = st
                peak = max(peak, len(snaps))
            else:
                snaps[-1] = st  # transient working state
        elif kind == "reverse":
            i = act[1]
            st = snaps.pop(-1, None)
            if st is None:
                st = snaps[i]
            reverse(i, st)
        else:
            del snaps[act[1]]
    if stats is not None:
        stats["peak_snapshots"] = peak
        stats["forward_steps"] = nadv
    return peak


def checkpointed_apply(spec: ProblemSpec, eta_z: Path, lam_z: float, deta: Path, plan: CheckpointPlan,
                       cfg: IntegratorConfig = IntegratorConfig(), stats: Optional[dict] = None) -> Path:
    """``sigma^T zeta`` with states recomputed from O(log n_t) snapshots.

    The instanton state is never stored in full: the forward model and its
    tangent are replayed from snapshots during the backward sweep.
    """
    _check_noise(spec, eta_z)
    _check_noise(spec, deta)
    grid = eta_z.grid
    if plan.grid != grid:
        raise DimensionError("checkpoint plan was built for a different grid")
    st = Stepper(spec, grid, cfg)
    s = st.forcing(eta_z.values)
    ds = st.forcing(deta.values)
    n_t = grid.n_t
    n = spec.state_dim

    # forward pass keeps only the final state
    x = np.array(spec.x0, dtype=np.float64)
    g = np.zeros(n)
    for i in range(n_t):
        x, g = st.step(i, x, s[i], s[i + 1]), st.step_tangent(i, x, s[i], g, ds[i], ds[i + 1])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(i + 1)
    dS2 = np.zeros((n_t + 1, n))
    R = {n_t: st.terminal_second(x, g, lam_z)}
    carry = {"p": st.terminal(x, lam_z), "r": R[n_t]}
    R_first = None

    def advance(i, state):
        xi, gi = state
        return st.step(i, xi, s[i], s[i + 1]), st.step_tangent(i, xi, s[i], gi, ds[i], ds[i + 1])

    def reverse(i, state):
        nonlocal R_first
        xi, gi = state
        p, r, a1, a2, b1, b2 = st.step_second(i, xi, s[i], gi, ds[i], carry["p"], carry["r"])
        dS2[i] += b1
        if b2 is not None:
            dS2[i + 1] += b2
        carry["p"], carry["r"] = p, r
        if i == 0:
            R_first = r

    run_reversed(plan, (np.array(spec.x0, dtype=np.float64), np.zeros(n)), advance, reverse, stats)
    # costate values are only needed where the quadrature weight vanishes
    Rarr = np.zeros((n_t + 1, n))
    Rarr[n_t] = R[n_t]
    Rarr[0] = R_first
    zeta = st.node_values(dS2, Rarr)
    w = grid.weights
    if np.any(w[1:-1] <= 0):
        raise DimensionError("checkpointed application needs positive interior weights")
    return Path(grid, spec.sigma_adjoint(zeta))
