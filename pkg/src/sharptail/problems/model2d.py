"""Two-dimensional model SDE with quadratic coupling.

Drift ``b(x, y) = (-x - x y, -4 y + x^2)``, noise ``sigma = diag(1, 1/2)``
and observable ``f(x, y) = x + 2 y``.
"""
import numpy as np

from ..core import DiagonalLinear, ProblemSpec, QuadraticSystem

SIGMA = np.array([1.0, 0.5])
OBS = np.array([1.0, 2.0])


def _nonlinear(x):
    out = np.empty_like(x)
    out[..., 0] = -x[..., 0] * x[..., 1]
    out[..., 1] = x[..., 0] * x[..., 0]
    return out


def _jac(x, v):
    out = np.empty(np.broadcast_shapes(np.shape(x), np.shape(v)))
    out[..., 0] = -x[..., 1] * v[..., 0] - x[..., 0] * v[..., 1]
    out[..., 1] = 2.0 * x[..., 0] * v[..., 0]
    return out


def _jac_t(x, a):
    out = np.empty(np.broadcast_shapes(np.shape(x), np.shape(a)))
    out[..., 0] = -x[..., 1] * a[..., 0] + 2.0 * x[..., 0] * a[..., 1]
    out[..., 1] = -x[..., 0] * a[..., 0]
    return out


def _hess(x, th, g):
    # <nabla^2 N, th> = [[2 th_2, -th_1], [-th_1, 0]]
    out = np.empty(np.broadcast_shapes(np.shape(th), np.shape(g)))
    out[..., 0] = 2.0 * th[..., 1] * g[..., 0] - th[..., 0] * g[..., 1]
    out[..., 1] = -th[..., 0] * g[..., 0]
    return out


def quadratic_system() -> QuadraticSystem:
    quad = np.zeros((2, 2, 2))
    quad[0, 0, 1] = -1.0
    quad[1, 0, 0] = 1.0
    return QuadraticSystem(linear_diag=np.array([-1.0, -4.0]), quad=quad, sigma=np.diag(SIGMA),
                           obs_lin=OBS, obs_quad=np.zeros((2, 2)), x0=np.zeros(2))


def make_model2d() -> ProblemSpec:
    """The 2D model problem with analytic derivatives."""
    return ProblemSpec(
        state_dim=2,
        noise_rank=2,
        x0=np.zeros(2),
        nonlinear=_nonlinear,
        nonlinear_jac=_jac,
        nonlinear_jac_t=_jac_t,
        hessian_bilinear=_hess,
        sigma_apply=lambda w: w * SIGMA,
        sigma_adjoint=lambda v: v * SIGMA,
        observable=lambda x: x @ OBS,
        obs_grad=lambda x: np.broadcast_to(OBS, np.shape(x)).copy(),
        obs_hess_action=lambda x, v: np.zeros(np.shape(v)),
        linear=DiagonalLinear([-1.0, -4.0]),
        quadratic=quadratic_system(),
        name="model2d",
    )
