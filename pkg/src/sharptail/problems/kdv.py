"""Stochastic KdV equation on the periodic interval [0, 2 pi).

    u_t + u u_x = nu u_xx - kappa u_xxx + sqrt(eps) eta(x, t)

with large-scale forcing ``eta = pi^{-1/2} (dB_1 sin x + dB_2 cos x)`` and
observable ``u(0, T)``. The state holds nodal values on ``x_j = 2 pi j / n_x``
with the Euclidean inner product; derivatives are pseudo-spectral and the
quadratic term is dealiased with the 2/3 rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import FourierLinear, ProblemSpec
from ..errors import ConfigError


@dataclass(frozen=True)
class KdvConfig:
    n_x: int = 128
    n_t: int = 500
    T: float = 1.0
    nu: float = 0.04
    kappa: float = 0.04
    dealias: bool = True

    def __post_init__(self):
        n = int(self.n_x)
        if n < 32 or n & (n - 1):
            raise ConfigError("n_x must be a power of two >= 32")
        if self.n_t < 2 or not self.T > 0:
            raise ConfigError("invalid time discretization")


def make_kdv(cfg: KdvConfig = KdvConfig(), x0=None) -> ProblemSpec:
    n = int(cfg.n_x)
    x = 2 * np.pi * np.arange(n) / n
    k = np.arange(n // 2 + 1, dtype=np.float64)
    ik = 1j * k
    ik[-1] = 0.0  # odd derivative of the Nyquist mode
    mask = (k < n / 3.0) if cfg.dealias else np.ones_like(k, dtype=bool)
    symbol = -cfg.nu * k**2 + 1j * cfg.kappa * k**3
    linear = FourierLinear(symbol, n)
    S = np.vstack([np.sin(x), np.cos(x)]) / np.sqrt(np.pi)  # rows: noise profiles
    rfft, irfft = np.fft.rfft, np.fft.irfft

    def M(v):
        if not cfg.dealias:
            return v
        return irfft(rfft(v, axis=-1) * mask, n=n, axis=-1)

    def D(v):
        return irfft(rfft(v, axis=-1) * ik, n=n, axis=-1)

    def nonlinear(u):
        mu = M(u)
        return -0.5 * D(M(mu * mu))

    def jac(u, v):
        return -D(M(M(u) * M(v)))

    def jac_t(u, a):
        return M(M(u) * M(D(a)))

    def hess(u, th, g):
        return M(M(g) * M(D(th)))

    def obs_grad(u):
        e = np.zeros(np.shape(u))
        e[..., 0] = 1.0
        return e

    return ProblemSpec(
        state_dim=n,
        noise_rank=2,
        x0=np.zeros(n) if x0 is None else x0,
        nonlinear=nonlinear,
        nonlinear_jac=jac,
        nonlinear_jac_t=jac_t,
        hessian_bilinear=hess,
        sigma_apply=lambda w: w @ S,
        sigma_adjoint=lambda v: v @ S.T,
        observable=lambda u: u[..., 0],
        obs_grad=obs_grad,
        obs_hess_action=lambda u, v: np.zeros(np.shape(v)),
        linear=linear,
        name="kdv",
        meta={"x": x, "config": cfg},
    )
