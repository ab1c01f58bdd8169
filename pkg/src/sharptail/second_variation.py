"""Projected second variation of the observable map as a matrix-free operator.

``A_z = lam_z P (d^2 F / d eta^2) P`` with ``P`` the L2-orthogonal projector
onto the complement of ``eta_z``. Application costs one tangent and one
second-order adjoint sweep.
"""
from __future__ import annotations

import threading
from typing import Optional

import numpy as np

from .core import Path, ProblemSpec, l2_inner, l2_norm
from .errors import ConfigError, DimensionError, SingularInstantonError
from .instanton import InstantonResult
from .propagators import (CheckpointPlan, Stepper, _backward_second, _tangent, checkpointed_apply,
                          objective_and_gradient)

__all__ = ["SecondVariationOperator", "apply"]


class SecondVariationOperator:
    """Projected second variation at an instanton.

    Parameters
    ----------
    spec, instanton
        Problem and converged instanton.
    mode : {"exact", "finite_difference"}
        Exact second-order adjoints, or a one-sided difference of gradients
        with step ``fd_step * |eta_z| / |d|`` (``fd_step`` defaults to 1e-5).
    checkpointing : CheckpointPlan, optional
        Recompute states from snapshots instead of storing the instanton
        state path (exact mode only).
    """

    def __init__(self, spec: ProblemSpec, instanton: InstantonResult, mode: str = "exact",
                 fd_step: float = 1e-5, checkpointing: Optional[CheckpointPlan] = None):
        if mode not in ("exact", "finite_difference"):
            raise ConfigError(f"unknown mode {mode!r}")
        if not fd_step > 0:
            raise ConfigError("finite-difference step must be positive")
        self.spec = spec
        self.instanton = instanton
        self.mode = mode
        self.fd_step = float(fd_step)
        self.checkpointing = checkpointing
        self.grid = instanton.grid
        self.integrator = instanton.integrator
        self.lam = float(instanton.lam)
        eta = instanton.eta
        self._eta = eta.values
        self._eta_nn = l2_inner(eta, eta)
        if not self._eta_nn > 0:
            raise SingularInstantonError("instanton noise path vanishes; A_z is undefined")
        w = self.grid.weights
        self.active = w > 0
        self.sqrt_w = np.sqrt(w[self.active])
        self.dim = int(self.active.sum()) * spec.noise_rank
        self._stepper = Stepper(spec, self.grid, self.integrator)
        self._s = self._stepper.forcing(self._eta)
        self._X = instanton.phi.values
        self._lock = threading.Lock()
        self.apply_count = 0
        self._g0 = None

    # ---- projection ----------------------------------------------------
    def project(self, v: np.ndarray) -> np.ndarray:
        c = float(np.dot(self.grid.weights, np.einsum("ij,ij->i", self._eta, v))) / self._eta_nn
        return v - c * self._eta

    # ---- raw application ----------------------------------------------
    def _hessian(self, d: np.ndarray) -> np.ndarray:
        st = self._stepper
        if self.mode == "finite_difference":
            h = self.fd_step * np.sqrt(self._eta_nn) / max(np.sqrt(self._weighted_nn(d)), 1e-300)
            if self._g0 is None:
                self._g0 = self._grad(self._eta)
            return (self._grad(self._eta + h * d) - self._g0) / h
        if self.checkpointing is not None:
            out = checkpointed_apply(self.spec, self.instanton.eta, self.lam, Path(self.grid, d),
                                     self.checkpointing, self.integrator)
            return out.values
        ds = st.forcing(d)
        G = _tangent(st, self._X, self._s, ds, self._eta, d)
        dS2, R = _backward_second(st, self._X, G, self._s, ds, self.lam, self._eta, d)
        return self.spec.sigma_adjoint(st.node_values(dS2, R))

    def _grad(self, eta):
        return objective_and_gradient(self.spec, Path(self.grid, eta), self.lam, self.integrator)[3].values

    def _weighted_nn(self, v):
        return float(np.dot(self.grid.weights, np.einsum("ij,ij->i", v, v)))

    def apply_values(self, d: np.ndarray) -> np.ndarray:
        with self._lock:
            self.apply_count += 1
        d = np.asarray(d, dtype=np.float64)
        if d.shape != self._eta.shape:
            raise DimensionError(f"expected noise path of shape {self._eta.shape}, got {d.shape}")
        out = self.project(self._hessian(self.project(d)))
        out[~self.active] = 0.0
        return out

    def apply(self, d: Path) -> Path:
        """``A_z d`` as a noise path."""
        if d.grid != self.grid:
            raise DimensionError("path is not on the instanton grid")
        return Path(self.grid, self.apply_values(d.values))

    __call__ = apply

    # ---- standardized coordinates ----------------------------------------
    # u = W^{1/2} v on nodes with positive weight; there the operator is
    # symmetric in the Euclidean inner product.
    def to_std(self, v: np.ndarray) -> np.ndarray:
        return (v[self.active] * self.sqrt_w[:, None]).reshape(-1)

    def from_std(self, u: np.ndarray) -> np.ndarray:
        v = np.zeros_like(self._eta)
        v[self.active] = u.reshape(-1, self.spec.noise_rank) / self.sqrt_w[:, None]
        return v

    def matvec_std(self, u: np.ndarray) -> np.ndarray:
        return self.to_std(self.apply_values(self.from_std(u)))

    def eta_std(self) -> np.ndarray:
        """Unit vector along the instanton in standardized coordinates."""
        u = self.to_std(self._eta)
        return u / np.linalg.norm(u)

    def dense(self) -> np.ndarray:
        """Dense matrix in standardized coordinates (small problems only)."""
        N = self.dim
        M = np.empty((N, N))
        e = np.zeros(N)
        for j in range(N):
            e[j] = 1.0
            M[:, j] = self.matvec_std(e)
            e[j] = 0.0
        return M


def apply(op: SecondVariationOperator, d: Path) -> Path:
    return op.apply(d)
