"""Scalar Ornstein-Uhlenbeck process, an analytic oracle.

``dX = -k X dt + sqrt(eps) dB``, ``X_0 = 0``, observable ``f(x) = x``.
Then ``X_T ~ N(0, eps * Sigma)`` with ``Sigma = (1 - exp(-2 k T)) / (2 k)``.
"""
import numpy as np
from scipy.special import ndtr

from ..core import DiagonalLinear, ProblemSpec, QuadraticSystem
from ..errors import ConfigError


def ou_analytic(z: float, relaxation: float = 1.0, T: float = 1.0, eps: float | None = None) -> dict:
    """Closed-form rate function, multiplier, prefactor and exact tail."""
    k = float(relaxation)
    var = -np.expm1(-2.0 * k * T) / (2.0 * k)
    out = {
        "Sigma": var,
        "I_F": z * z / (2.0 * var),
        "lambda": z / var,
        "C_F": np.sqrt(var) / z if z != 0 else np.inf,
        "theta_T": z / var,
    }
    if eps is not None:
        x = z / np.sqrt(eps * var)
        out["x"] = x
        out["tail"] = float(ndtr(-x))
        out["pdf"] = float(np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi) / np.sqrt(eps * var))
    return out


def make_ou(relaxation: float = 1.0, T: float = 1.0) -> ProblemSpec:
    if not relaxation > 0:
        raise ConfigError("relaxation rate must be positive")
    k = float(relaxation)
    zero = lambda x: np.zeros(np.shape(x))  # noqa: E731
    qs = QuadraticSystem(linear_diag=np.array([-k]), quad=np.zeros((1, 1, 1)), sigma=np.ones((1, 1)),
                         obs_lin=np.ones(1), obs_quad=np.zeros((1, 1)), x0=np.zeros(1))
    return ProblemSpec(
        state_dim=1,
        noise_rank=1,
        x0=np.zeros(1),
        nonlinear=zero,
        nonlinear_jac=lambda x, v: np.zeros(np.shape(v)),
        nonlinear_jac_t=lambda x, a: np.zeros(np.shape(a)),
        hessian_bilinear=lambda x, th, g: np.zeros(np.shape(g)),
        sigma_apply=lambda w: np.array(w, dtype=np.float64),
        sigma_adjoint=lambda v: np.array(v, dtype=np.float64),
        observable=lambda x: x[..., 0],
        obs_grad=lambda x: np.ones(np.shape(x)),
        obs_hess_action=lambda x, v: np.zeros(np.shape(v)),
        linear=DiagonalLinear([-k]),
        quadratic=qs,
        name="ou",
        meta={"relaxation": k, "T": float(T), "analytic": lambda z, eps=None: ou_analytic(z, k, T, eps)},
    )
