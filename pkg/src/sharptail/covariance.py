"""Conditioned Gaussian fluctuations around the instanton (the transition tube).

For eigenpairs ``(mu_i, v_i)`` of ``A_z`` let ``gamma_i`` solve the
linearized state equation driven by ``v_i``. The conditioned covariance is

    C(t, t') = sum_i gamma_i(t) gamma_i(t')^T / (1 - mu_i)

over an orthonormal basis of the complement of ``eta_z``. Writing
``1 / (1 - mu) = 1 + mu / (1 - mu)``, the sum splits into the covariance of
the linearized map restricted to the complement, which is computed exactly
from adjoint sweeps, and a correction that only involves modes with
non-negligible ``mu``. This removes the truncation error of the plain sum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Path, ProblemSpec
from .errors import ConfigError
from .propagators import Stepper, _tangent
from .rng import counter_normals
from .spectrum import SpectrumResult

log = logging.getLogger(__name__)

__all__ = ["TubeModel", "build_tube", "covariance_at", "tube_marginal", "sample_tube_endpoint",
           "boundary_residuals"]


@dataclass
class TubeModel:
    """Eigenmodes of the linearized fluctuations along an instanton.

    ``modes[i, j]`` is ``gamma_i`` at node ``nodes[j]``; the final node is
    always stored. ``remainder`` is ``"complement"`` (exact remainder of the
    mode sum) or ``"none"`` (plain truncated sum).
    """

    spec: ProblemSpec
    instanton: object
    eigenvalues: np.ndarray
    nodes: np.ndarray
    modes: np.ndarray
    drift_mode: np.ndarray  # linearized response to eta_z at the stored nodes
    remainder: str = "complement"
    _rep_cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self):
        return self.instanton.grid

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / (1.0 - self.eigenvalues)

    def slot(self, t: float) -> tuple[int, int]:
        """(grid node, storage slot) of time ``t``."""
        k = self.grid.index_of(t)
        j = np.searchsorted(self.nodes, k)
        if j >= self.nodes.size or self.nodes[j] != k:
            raise ConfigError(f"t={t} is not a stored node (stride too coarse)")
        return k, int(j)

    def gamma(self, i: int) -> np.ndarray:
        """Mode ``i`` at the stored nodes."""
        return self.modes[i]

    # adjoint representers of eta -> gamma(t_k), in noise coordinates
    def _representers(self, k: int) -> np.ndarray:
        if k in self._rep_cache:
            return self._rep_cache[k]
        inst = self.instanton
        spec = self.spec
        st = Stepper(spec, inst.grid, inst.integrator)
        X = inst.phi.values
        s = st.forcing(inst.eta.values)
        n = spec.state_dim
        w = inst.grid.weights
        out = np.zeros((inst.grid.n_t + 1, n, spec.noise_rank))
        p = np.eye(n)
        nxt = np.zeros((n, n))
        for i in range(k - 1, -1, -1):
            p, a1, a2 = st.step_adjoint(i, X[i], s[i], p)
            out[i + 1] = spec.sigma_adjoint(nxt if a2 is None else nxt + a2)
            nxt = a1
        out[0] = spec.sigma_adjoint(nxt)
        pos = w > 0
        out[pos] /= w[pos, None, None]
        out[~pos] = 0.0
        if len(self._rep_cache) > 8:
            self._rep_cache.clear()
        self._rep_cache[k] = out
        return out


def build_tube(spec: ProblemSpec, instanton, sr: SpectrumResult, stride: int = 1,
               remainder: str = "complement") -> TubeModel:
    """Solve the linearized state equation for each eigenvector of ``A_z``."""
    if remainder not in ("complement", "none"):
        raise ConfigError(f"unknown remainder mode {remainder!r}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    grid = instanton.grid
    if sr.grid is not None and sr.grid != grid:
        raise ConfigError("spectrum and instanton grids differ")
    nodes = np.arange(0, grid.n_t + 1, stride)
    if nodes[-1] != grid.n_t:
        nodes = np.append(nodes, grid.n_t)
    st = Stepper(spec, grid, instanton.integrator)
    X = instanton.phi.values
    eta = instanton.eta.values
    s = st.forcing(eta)
    m = sr.eigenvalues.size
    modes = np.empty((m, nodes.size, spec.state_dim))
    for i in range(m):
        d = sr.eigenvectors[i]
        modes[i] = _tangent(st, X, s, st.forcing(d), eta, d)[nodes]
    g = _tangent(st, X, s, s, eta, eta)[nodes]
    return TubeModel(spec, instanton, np.asarray(sr.eigenvalues, dtype=float), nodes, modes, g, remainder)


def covariance_at(tm: TubeModel, t: float, t2: Optional[float] = None) -> np.ndarray:
    """Two-time covariance ``C(t, t2)`` (``t2`` defaults to ``t``)."""
    t2 = t if t2 is None else t2
    k1, j1 = tm.slot(t)
    k2, j2 = tm.slot(t2)
    G1 = tm.modes[:, j1]
    G2 = tm.modes[:, j2]
    if tm.remainder == "none":
        return np.einsum("i,iu,iv->uv", tm.weights, G1, G2)
    mu = tm.eigenvalues
    C = np.einsum("i,iu,iv->uv", mu / (1.0 - mu), G1, G2)
    w = tm.grid.weights
    R1 = tm._representers(k1)
    R2 = R1 if k2 == k1 else tm._representers(k2)
    K = np.einsum("t,tur,tvr->uv", w, R1, R2)
    eta = tm.instanton.eta.values
    nn = float(np.dot(w, np.einsum("tr,tr->t", eta, eta)))
    C += K - np.outer(tm.drift_mode[j1], tm.drift_mode[j2]) / nn
    return C


def tube_marginal(tm: TubeModel, t: float, eps: float):
    """Mean ``phi_z(t)`` and covariance ``eps C(t, t)`` of the Gaussian tube."""
    if not eps > 0:
        raise ConfigError("eps must be positive")
    k, _ = tm.slot(t)
    C = covariance_at(tm, t)
    return tm.instanton.phi.values[k].copy(), eps * 0.5 * (C + C.T)


def sample_tube_endpoint(tm: TubeModel, eps: float, rng_seed: int, count: int,
                         enforce_constraint: bool = True) -> np.ndarray:
    """Draws from ``N(phi_z(T), eps C(T, T))`` through its eigendecomposition.

    With ``enforce_constraint`` the covariance is projected onto the
    orthogonal complement of ``grad f(phi_z(T))``, which it annihilates up
    to the stationarity residual of the instanton.
    """
    if not eps > 0 or count < 1:
        raise ConfigError("need eps > 0 and count >= 1")
    T = tm.grid.T
    mean, S = tube_marginal(tm, T, eps)
    if enforce_constraint:
        gf = np.asarray(tm.spec.obs_grad(mean), dtype=float)
        u = gf / np.linalg.norm(gf)
        P = np.eye(u.size) - np.outer(u, u)
        S = P @ S @ P
    nu, V = np.linalg.eigh(0.5 * (S + S.T))
    nu = np.clip(nu, 0.0, None)
    Z = counter_normals(rng_seed, 0, count, nu.size)
    X = mean + (Z * np.sqrt(nu)) @ V.T
    if enforce_constraint:
        X -= np.outer((X - mean) @ u, u)
    return X


def boundary_residuals(tm: TubeModel) -> np.ndarray:
    """``|<grad f(phi_z(T)), gamma_i(T)>| / (|grad f| |gamma_i(T)|)`` per mode."""
    xT = tm.instanton.phi.values[-1]
    gf = np.asarray(tm.spec.obs_grad(xT), dtype=float)
    GT = tm.modes[:, -1]
    nrm = np.linalg.norm(GT, axis=1) * np.linalg.norm(gf)
    return np.abs(GT @ gf) / np.where(nrm > 0, nrm, 1.0)
