"""Generic problems with diagonal linear part and quadratic nonlinearity."""
import numpy as np

from ..core import DiagonalLinear, ProblemSpec, QuadraticSystem


def make_quadratic(qs: QuadraticSystem, name: str = "quadratic") -> ProblemSpec:
    """Build a :class:`ProblemSpec` from quadratic coefficients."""
    Q = qs.quad
    Qs = qs.quad_sym
    S = qs.sigma
    c = qs.obs_lin
    M = 0.5 * (qs.obs_quad + qs.obs_quad.T)

    def nonlinear(x):
        return np.einsum("kij,...i,...j->...k", Q, x, x)

    def jac(x, v):
        return np.einsum("kij,...i,...j->...k", Qs, v, x)

    def jac_t(x, a):
        return np.einsum("kij,...k,...j->...i", Qs, a, x)

    def hess(x, th, g):
        return np.einsum("kij,...k,...j->...i", Qs, th, g)

    return ProblemSpec(
        state_dim=qs.linear_diag.size,
        noise_rank=S.shape[1],
        x0=qs.x0,
        nonlinear=nonlinear,
        nonlinear_jac=jac,
        nonlinear_jac_t=jac_t,
        hessian_bilinear=hess,
        sigma_apply=lambda w: w @ S.T,
        sigma_adjoint=lambda v: v @ S,
        observable=lambda x: x @ c + 0.5 * np.einsum("...i,ij,...j->...", x, M, x),
        obs_grad=lambda x: c + x @ M,
        obs_hess_action=lambda x, v: v @ M,
        linear=DiagonalLinear(qs.linear_diag),
        quadratic=qs,
        name=name,
    )
