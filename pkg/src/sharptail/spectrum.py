"""Dominant eigenpairs of the projected second variation and the Fredholm determinant.

The eigensolver is a thick-restart Lanczos method with full
reorthogonalization, targeting eigenvalues of largest magnitude of a
symmetric (possibly indefinite) operator. It works in standardized
coordinates ``u = W^{1/2} v`` where the L2 inner product is Euclidean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import eigh

from .core import Path
from .errors import AssumptionViolation, ConfigError, NonConvergenceError
from .second_variation import SecondVariationOperator

log = logging.getLogger(__name__)

__all__ = ["SpectrumResult", "LanczosInfo", "lanczos_largest", "dominant_eigenpairs",
           "fredholm_determinant", "DeterminantEstimate"]

EPS23 = np.finfo(float).eps ** (2.0 / 3.0)


@dataclass
class LanczosInfo:
    matvecs: int
    restarts: int
    converged: bool
    n_converged: int


def _orthogonalize(V, w, passes=2):
    c = np.zeros(V.shape[1])
    for _ in range(passes):
        d = V.T @ w
        w -= V @ d
        c += d
    return w, c


def lanczos_largest(matvec: Callable, N: int, m: int, tol: float = 1e-8, ncv: Optional[int] = None,
                    max_restarts: int = 200, v0: Optional[np.ndarray] = None, seed: int = 0,
                    deflate: Optional[np.ndarray] = None):
    """Largest-magnitude eigenpairs of a symmetric operator on R^N.

    Parameters
    ----------
    matvec : callable
        ``u -> A u``.
    m : int
        Number of wanted eigenpairs.
    tol : float
        Ritz pair ``i`` is accepted when its residual is at most
        ``tol * max(eps^(2/3) |theta_1|, |theta_i|)``.
    deflate : ndarray, optional
        Unit vectors spanning a known invariant null space; the Krylov
        basis is kept orthogonal to them.

    Returns
    -------
    theta, Y, res, info
        Eigenvalues sorted by decreasing magnitude, eigenvectors (columns),
        residual norms and iteration information.
    """
    if m < 1:
        raise ConfigError("need m >= 1")
    n_defl = 0 if deflate is None else deflate.shape[1]
    if m > N - n_defl:
        raise ConfigError(f"cannot compute {m} eigenpairs in dimension {N - n_defl}")
    if ncv is None:
        ncv = max(2 * m + 20, 40)
    ncv = int(min(ncv, N - n_defl))
    rng = np.random.default_rng(seed)

    def clean(w):
        if n_defl:
            w, _ = _orthogonalize(deflate, w)
        return w

    V = np.zeros((N, ncv + 1))
    T = np.zeros((ncv, ncv))
    v = rng.standard_normal(N) if v0 is None else np.array(v0, dtype=float)
    v = clean(v)
    V[:, 0] = v / np.linalg.norm(v)
    k = 0
    matvecs = 0
    restarts = 0
    beta_last = 0.0
    converged = False
    while True:
        for j in range(k, ncv):
            w = clean(matvec(V[:, j]))
            matvecs += 1
            w, c = _orthogonalize(V[:, : j + 1], w)
            T[: j + 1, j] = c
            T[j, : j + 1] = c
            beta = np.linalg.norm(w)
            scale = max(np.abs(c).max(), np.abs(T[: j + 1, : j + 1]).max(), 1e-300)
            if beta <= 1e-12 * scale or beta == 0.0:
                # invariant subspace: continue with a fresh orthogonal direction
                for _ in range(5):
                    w = clean(rng.standard_normal(N))
                    w, _c = _orthogonalize(V[:, : j + 1], w)
                    nw = np.linalg.norm(w)
                    if nw > 1e-8:
                        break
                w = w / nw if nw > 1e-8 else np.zeros(N)
                beta = 0.0
            else:
                w = w / beta
            V[:, j + 1] = w
            if j + 1 < ncv:
                T[j + 1, j] = T[j, j + 1] = beta
            beta_last = beta
        theta, S = eigh(T)
        order = np.lexsort((-theta, -np.abs(theta)))
        theta = theta[order]
        S = S[:, order]
        res = np.abs(beta_last * S[-1, :])
        ref = EPS23 * max(abs(theta[0]), 1e-300)
        ok = res[:m] <= tol * np.maximum(ref, np.abs(theta[:m]))
        n_conv = int(ok.sum())
        if ok.all():
            converged = True
            break
        if restarts >= max_restarts:
            break
        restarts += 1
        kk = min(m + (ncv - m) // 2, ncv - 1)
        Vk = V[:, :ncv] @ S[:, :kk]
        V[:, :kk] = Vk
        V[:, kk] = V[:, ncv]
        V[:, kk + 1:] = 0.0
        T[:] = 0.0
        T[np.arange(kk), np.arange(kk)] = theta[:kk]
        # the arrowhead row T[kk, :kk] is filled by the projection of the next matvec
        k = kk
        log.debug("restart %d: %d/%d converged", restarts, n_conv, m)
    Y = V[:, :ncv] @ S[:, :m]
    return theta[:m], Y, res[:m], LanczosInfo(matvecs, restarts, converged, n_conv)


@dataclass
class SpectrumResult:
    """Dominant eigenpairs of ``A_z`` and the partial determinant products."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (m, n_t + 1, r) noise paths, L2-orthonormal
    residuals: np.ndarray
    partial_products: np.ndarray
    matvec_count: int
    seed: int
    converged: bool
    restarts: int = 0
    grid: object = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.eigenvalues.size

    def eigenvector(self, i: int) -> Path:
        return Path(self.grid, self.eigenvectors[i])

    @property
    def assumption_ok(self) -> bool:
        """All eigenvalues below one (positive definite ``Id - A_z``)."""
        return bool(np.all(self.eigenvalues < 1.0))


def dominant_eigenpairs(op: SecondVariationOperator, m: int, tol: float = 1e-8, max_restarts: int = 200,
                        seed: int = 0, ncv: Optional[int] = None, strict: bool = False) -> SpectrumResult:
    """The ``m`` eigenpairs of ``A_z`` of largest magnitude.

    The start vector is drawn from ``seed`` and projected away from the
    instanton direction, which spans part of the kernel of ``A_z``.
    """
    N = op.dim
    if m > N - 1:
        raise ConfigError(f"m={m} exceeds the dimension of the complement of eta_z ({N - 1})")
    e = op.eta_std()[:, None]
    count0 = op.apply_count
    theta, Y, res, info = lanczos_largest(op.matvec_std, N, m, tol=tol, ncv=ncv, max_restarts=max_restarts,
                                          seed=seed, deflate=e)
    vecs = np.stack([op.from_std(Y[:, i]) for i in range(m)])
    sr = SpectrumResult(
        eigenvalues=theta,
        eigenvectors=vecs,
        residuals=res,
        partial_products=np.cumprod(1.0 - theta),
        matvec_count=op.apply_count - count0,
        seed=seed,
        converged=info.converged,
        restarts=info.restarts,
        grid=op.grid,
        meta={"n_converged": info.n_converged, "tol": tol},
    )
    if not info.converged:
        log.warning("eigensolver: %d of %d pairs converged after %d restarts", info.n_converged, m,
                    info.restarts)
        if strict:
            raise NonConvergenceError("eigensolver did not converge", sr)
    if not sr.assumption_ok:
        log.warning("eigenvalue >= 1 found: Id - A_z is not positive definite")
    return sr


class DeterminantEstimate(tuple):
    """``(det, k_used, tail_flag)`` with plateau diagnostics as attributes.

    ``tail_flag`` is set when the smallest computed eigenvalue is not below
    the truncation threshold. ``plateau_converged`` reports whether the
    partial products changed by at most ``plateau_tol`` (relative) over the
    last quarter of the computed eigenvalues.
    """

    def __new__(cls, det, k_used, tail_flag, plateau_change, plateau_converged):
        self = super().__new__(cls, (float(det), int(k_used), bool(tail_flag)))
        self.plateau_change = float(plateau_change)
        self.plateau_converged = bool(plateau_converged)
        return self

    @property
    def det(self):
        return self[0]

    @property
    def k_used(self):
        return self[1]

    @property
    def tail_flag(self):
        return self[2]

    @property
    def converged(self):
        return self.plateau_converged


def fredholm_determinant(sr: SpectrumResult, truncation_tol: float = 1e-6,
                         plateau_tol: float = 1e-3) -> DeterminantEstimate:
    """Truncated product ``prod (1 - mu_i)`` over the computed eigenvalues."""
    mu = np.asarray(sr.eigenvalues, dtype=float)
    if mu.size == 0:
        raise ConfigError("empty spectrum")
    if np.any(mu >= 1.0):
        raise AssumptionViolation(f"eigenvalue {mu.max():.6g} >= 1: Id - A_z is not positive definite")
    scale = np.abs(mu).max()
    keep = np.abs(mu) > truncation_tol * scale if scale > 0 else np.zeros(mu.size, dtype=bool)
    det = float(np.prod(1.0 - mu[keep]))
    tail_flag = bool(scale > 0 and abs(mu[-1]) > truncation_tol * scale)
    pp = np.cumprod(1.0 - mu)
    j = max(0, (3 * mu.size) // 4 - 1)
    change = abs(pp[-1] - pp[j]) / abs(pp[-1])
    return DeterminantEstimate(det, int(keep.sum()), tail_flag, change, change <= plateau_tol)
