import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import ndtr

from sharptail.errors import AssumptionViolation, ConfigError, NonConvergenceError
from sharptail.estimates import (DiscreteObservableMap, build_report, finite_dim_sorm, log_tail_probability,
                                 pdf_estimate, prefactor_fredholm, tail_probability)
from sharptail.instanton import InstantonConfig, solve_instanton
from sharptail.riccati import solve_riccati
from sharptail.second_variation import SecondVariationOperator
from sharptail.spectrum import SpectrumResult, dominant_eigenpairs


def _sr(mu):
    mu = np.asarray(mu, dtype=float)
    return SpectrumResult(mu, np.zeros((mu.size, 3, 1)), np.zeros(mu.size), np.cumprod(1 - mu), 0, 0, True)


def test_formula_examples():
    p = tail_probability(4.6, 0.4, 0.5)
    assert p == pytest.approx(np.sqrt(0.5 / (2 * np.pi)) * 0.4 * np.exp(-9.2), rel=1e-14)
    assert tail_probability(4.6, 0.4, 0.5, log10=True) == pytest.approx(np.log10(p), rel=1e-14)
    assert pdf_estimate(4.6, 2.0, 0.4, 0.5) == pytest.approx(2.0 * 0.4 * np.exp(-9.2) / np.sqrt(np.pi), rel=1e-14)
    with pytest.raises(ConfigError):
        tail_probability(1.0, 1.0, 0.0)
    np.testing.assert_allclose(tail_probability(1.0, 1.0, [0.1, 0.2]),
                               [tail_probability(1.0, 1.0, 0.1), tail_probability(1.0, 1.0, 0.2)], rtol=1e-15)


def test_degenerate_limits():
    assert pdf_estimate(1.0, 0.0, 1.0, 0.1) == 0.0
    assert tail_probability(np.inf, 1.0, 0.1) == 0.0
    assert log_tail_probability(1e6, 1.0, 0.1) < -1e6


@given(st.floats(0.01, 50), st.floats(1e-3, 1e3), st.floats(1e-3, 10))
def test_log_tail_consistent(I_F, C_F, eps):
    lp = log_tail_probability(I_F, C_F, eps)
    assert lp == pytest.approx(np.log(np.sqrt(eps / (2 * np.pi)) * C_F) - I_F / eps, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("x", [4.0, 5.0, 7.0])
def test_ou_density_and_tail(ou, x):
    z = 1.0
    a0 = ou.meta["analytic"](z)
    eps = (z / x) ** 2 / a0["Sigma"]
    a = ou.meta["analytic"](z, eps=eps)
    assert pdf_estimate(a["I_F"], a["lambda"], a["C_F"], eps) == pytest.approx(a["pdf"], rel=2e-2)
    # the tail estimate is the leading Mills-ratio term
    r = tail_probability(a["I_F"], a["C_F"], eps) / a["tail"]
    assert 1.0 < r < 1.0 + 1.2 / x**2


def test_sorm_linear_exact():
    a = np.array([1.0, -2.0, 0.5])
    r = finite_dim_sorm(lambda u: a @ u, lambda u: a, lambda u: np.zeros((3, 3)), 2.0, 0.1, x0=np.ones(3))
    assert r.I_F == pytest.approx(2.0 / (a @ a), rel=1e-12)
    assert r.C_F == pytest.approx(np.linalg.norm(a) / 2.0, rel=1e-12)
    assert r.det == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        finite_dim_sorm(lambda u: a @ u, lambda u: a, lambda u: np.zeros((3, 3)), 2.0, 0.1)


def test_sorm_quadratic_vs_quadrature():
    c, z, eps = 0.3, 1.0, 0.01
    r = finite_dim_sorm(lambda u: u[0] + c * u[1] ** 2, lambda u: np.array([1.0, 2 * c * u[1]]),
                        lambda u: np.array([[0.0, 0.0], [0.0, 2 * c]]), z, eps, x0=np.array([0.5, 0.1]))
    assert r.lam == pytest.approx(1.0, abs=1e-10)
    assert r.det == pytest.approx(1 - 2 * c, rel=1e-10)
    s = np.sqrt(eps)
    exact, _ = quad(lambda y: ndtr(-(z - c * y * y) / s) * np.exp(-y * y / (2 * eps)) / np.sqrt(2 * np.pi * eps),
                    -20 * s, 20 * s, epsabs=0, epsrel=1e-12, limit=200)
    assert r.tail == pytest.approx(exact, rel=3e-2)
    with pytest.raises(AssumptionViolation):
        finite_dim_sorm(lambda u: u[0] + 0.6 * u[1] ** 2, lambda u: np.array([1.0, 1.2 * u[1]]),
                        lambda u: np.array([[0.0, 0.0], [0.0, 1.2]]), z, eps, x0=np.array([1.0, 0.0]))


def test_sorm_on_discrete_map_matches_pipeline(model2d, inst2d_small):
    inst = inst2d_small
    dm = DiscreteObservableMap(model2d, inst.grid, inst.integrator)
    r = finite_dim_sorm(dm.F, dm.grad, dm.hess, 3.0, 0.5, x0=dm.to_std(inst.eta))
    op = SecondVariationOperator(model2d, inst)
    sr = dominant_eigenpairs(op, op.dim - 1, tol=1e-10)
    C = prefactor_fredholm(inst, sr, require_plateau=False)
    assert r.I_F == pytest.approx(inst.rate, rel=1e-8)
    assert r.lam == pytest.approx(inst.lam, rel=1e-6)
    assert r.C_F == pytest.approx(C, rel=1e-6)


def test_prefactor_errors(model2d, inst2d_small):
    with pytest.raises(NonConvergenceError):
        prefactor_fredholm(inst2d_small, _sr(np.full(20, 0.05)))
    assert prefactor_fredholm(4.0, _sr([0.5, -0.5]), require_plateau=False) == pytest.approx((8 * 0.75) ** -0.5)
    with pytest.raises(AssumptionViolation):
        prefactor_fredholm(0.0, _sr([0.5, -0.5]), require_plateau=False)


def test_tail_monotone_in_z(ou):
    tails = []
    for z in (0.5, 1.0, 1.5, 2.0):
        inst = solve_instanton(ou, InstantonConfig(z, n_t=200, scheme="rk2_if"))
        rr = solve_riccati(ou, inst)
        tails.append(tail_probability(inst.rate, rr.C_F, 0.25))
    assert np.all(np.diff(tails) < 0)


def test_model2d_density_slope(model2d):
    # -eps d log rho / dz tends to lambda as eps -> 0
    eps, dz = 0.1, 0.05
    vals = {}
    for z in (3.0 - dz, 3.0, 3.0 + dz):
        inst = solve_instanton(model2d, InstantonConfig(z, n_t=400, scheme="rk2_if"))
        vals[z] = (inst, solve_riccati(model2d, inst).C_F)
    logp = {z: np.log(pdf_estimate(i.rate, i.lam, c, eps)) for z, (i, c) in vals.items()}
    slope = -eps * (logp[3.0 + dz] - logp[3.0 - dz]) / (2 * dz)
    assert slope == pytest.approx(vals[3.0][0].lam, rel=5e-2)


def test_build_report(model2d, inst2d_rk2):
    sr = dominant_eigenpairs(SecondVariationOperator(model2d, inst2d_rk2), 120)
    rr = solve_riccati(model2d, inst2d_rk2)
    rep = build_report(inst2d_rk2, sr, [0.25, 0.5], C_F_riccati=rr.C_F)
    d = rep.as_dict()
    assert d["z"] == 3.0 and len(d["tail_prob"]) == 2
    assert rep.C_F_fredholm == pytest.approx(rr.C_F, rel=1e-3)
    assert rep.tail_prob[0] < rep.tail_prob[1]
    assert np.allclose(rep.log10_tail_prob, np.log10(rep.tail_prob))
    assert rep.plateau_converged
