"""Acceptance criteria 1-10, one printed verdict line each.

Run alone with ``pytest tests/test_acceptance.py -s``; the verdicts are also
collected in the terminal summary. The full suite takes roughly half an hour
on one core.
"""
import time

import numpy as np
import pytest

from sharptail import _backend
from sharptail.core import Path, l2_norm, project_orthogonal
from sharptail.covariance import boundary_residuals, build_tube, covariance_at
from sharptail.estimates import prefactor_fredholm, tail_probability
from sharptail.instanton import InstantonConfig, make_grid, solve_instanton
from sharptail.problems import KdvConfig, make_kdv
from sharptail.propagators import CheckpointPlan, IntegratorConfig, checkpointed_apply, gradient, hessian_apply, \
    solve_state
from sharptail.riccati import RiccatiConfig, final_time_covariance_riccati, solve_riccati
from sharptail.sampling import McConfig, direct_tail_mc, importance_sampled_paths
from sharptail.second_variation import SecondVariationOperator
from sharptail.spectrum import dominant_eigenpairs, fredholm_determinant

pytestmark = pytest.mark.slow

KDV_Z = 8.39125


def rel(a, b):
    return abs(a - b) / abs(b)


@pytest.fixture(scope="module")
def model_spectrum(model2d, inst2d_euler):
    """Reference discretization (IF-Euler, dt = 5e-4) and its 200 dominant modes."""
    t0 = time.perf_counter()
    op = SecondVariationOperator(model2d, inst2d_euler)
    sr = dominant_eigenpairs(op, 200)
    return sr, time.perf_counter() - t0


@pytest.fixture(scope="module")
def kdv256():
    spec = make_kdv(KdvConfig(256, 1000))
    t0 = time.perf_counter()
    inst = solve_instanton(spec, InstantonConfig(KDV_Z, n_t=1000, scheme="rk2_if"))
    t_inst = time.perf_counter() - t0
    return spec, inst, t_inst


@pytest.fixture(scope="module")
def kdv256_spectrum(kdv256):
    spec, inst, _ = kdv256
    t0 = time.perf_counter()
    sr = dominant_eigenpairs(SecondVariationOperator(spec, inst), 80)
    return sr, time.perf_counter() - t0


def test_c1_model_determinant(acceptance_line, model_spectrum):
    sr, secs = model_spectrum
    det = sr.partial_products[-1]
    ok = rel(det, 1.0397) <= 5e-3 and secs < 300
    acceptance_line(1, ok, f"2D det(I - A_z) = {det:.5f} (target 1.0397 +-0.5%), {sr.matvec_count} matvecs, "
                           f"{secs:.0f} s")
    assert ok


def test_c2_model_tail_vs_mc(acceptance_line, model2d, inst2d_euler, model_spectrum):
    sr, _ = model_spectrum
    C = prefactor_fredholm(inst2d_euler, sr, require_plateau=False)
    p = float(tail_probability(inst2d_euler.rate, C, 0.5))
    t0 = time.perf_counter()
    mc = direct_tail_mc(model2d, McConfig(0.5, 1_000_000, z=3.0, dt=5e-4, seed=2024))
    secs = time.perf_counter() - t0
    lo, hi = mc.interval
    ok = rel(p, 8.94e-6) <= 1e-2 and lo <= p <= hi
    acceptance_line(2, ok, f"2D tail = {p:.4e} (target 8.94e-6 +-1%); MC {mc.hits}/{mc.n} hits, "
                           f"Wilson 95% [{lo:.3e}, {hi:.3e}], {secs:.0f} s")
    assert ok


def test_c3_route_cross_validation(acceptance_line, model2d, inst2d_euler, model_spectrum, kdv256,
                                   kdv256_spectrum):
    sr, _ = model_spectrum
    c_f = prefactor_fredholm(inst2d_euler, sr, require_plateau=False)
    c_r = solve_riccati(model2d, inst2d_euler, RiccatiConfig(store_path=False)).C_F
    spec, inst, _ = kdv256
    ksr, _ = kdv256_spectrum
    k_f = prefactor_fredholm(inst, ksr, require_plateau=False)
    k_r = solve_riccati(spec, inst, RiccatiConfig(store_path=False)).C_F
    d2, dk = rel(c_r, c_f), rel(k_r, k_f)
    ok = d2 <= 1e-3 and dk <= 5e-3
    acceptance_line(3, ok, f"Riccati vs Fredholm: 2D {c_r:.6f}/{c_f:.6f} rel {d2:.1e} (<=1e-3); "
                           f"KdV(256,1000) {k_r:.6e}/{k_f:.6e} rel {dk:.1e} (<=5e-3)")
    assert ok


def test_c4_kdv_rate_table(acceptance_line, kdv256):
    spec128 = make_kdv(KdvConfig(128, 500))
    t0 = time.perf_counter()
    i128 = solve_instanton(spec128, InstantonConfig(KDV_Z, n_t=500, scheme="rk2_if"))
    t128 = time.perf_counter() - t0
    _, i256, t256 = kdv256
    values_ok = rel(i128.rate, 34.605) <= 1e-3 and rel(i256.rate, 34.681) <= 1e-3
    iters_ok = all(268 / 2 <= r.iters <= 283 * 2 for r in (i128, i256))
    ok = values_ok and iters_ok and max(t128, t256) <= 900
    acceptance_line(4, ok, f"KdV I_F = {i128.rate:.4f} (128,500), {i256.rate:.4f} (256,1000) "
                           f"[{'ok' if values_ok else 'off'} at 0.1%]; iterations {i128.iters}, {i256.iters} "
                           f"(window 134-566: {'ok' if iters_ok else 'outside'}); {t128:.0f} s, {t256:.0f} s")
    assert ok


def test_c5_kdv_plateau(acceptance_line, kdv256_spectrum):
    sr, secs = kdv256_spectrum
    pp = sr.partial_products
    change = abs(pp[79] - pp[9]) / abs(pp[79])
    ok = change <= 1e-3 and secs <= 1800
    acceptance_line(5, ok, f"KdV |P80 - P10|/|P80| = {change:.2e} (<=1e-3), P80 = {pp[79]:.4f}, "
                           f"mu_1 = {sr.eigenvalues[0]:.3f}, {secs:.0f} s")
    assert ok


def test_c6_ou_oracle(acceptance_line, ou):
    inst = solve_instanton(ou, InstantonConfig(1.0, n_t=1000, scheme="rk2_if"))
    sr = dominant_eigenpairs(SecondVariationOperator(ou, inst), 20)
    de = fredholm_determinant(sr)
    C = prefactor_fredholm(inst, de, require_plateau=False)
    a0 = ou.meta["analytic"](1.0)
    # sharp Gaussian asymptote phi(x)/x at x = 4, 5, 6
    asym = []
    for x in (4.0, 5.0, 6.0):
        eps = 1.0 / (x * x * a0["Sigma"])
        est = float(tail_probability(inst.rate, C, eps))
        asym.append(rel(est, np.exp(-x * x / 2) / (x * np.sqrt(2 * np.pi))))
    a = ou.meta["analytic"](1.0, eps=0.25)
    mc = direct_tail_mc(ou, McConfig(0.25, 1_000_000, z=1.0, dt=1e-3, seed=7))
    in_ci = mc.interval[0] <= a["tail"] <= mc.interval[1]
    mu = np.max(np.abs(sr.eigenvalues))
    ok = (abs(inst.rate - 1.156518) <= 1e-5 and mu <= 1e-8 and abs(de.det - 1) <= 1e-6
          and abs(C - 0.657458) <= 1e-4 and max(asym) <= 2e-2 and in_ci)
    acceptance_line(6, ok, f"OU I_F = {inst.rate:.6f}, max|mu| = {mu:.1e}, det = {de.det:.8f}, C_F = {C:.6f}, "
                           f"asymptote dev {max(asym):.1e}, exact tail {a['tail']:.3e} in "
                           f"[{mc.interval[0]:.3e}, {mc.interval[1]:.3e}]: {in_ci}")
    assert ok


def test_c7_dense_oracle(acceptance_line, model2d, inst2d_small):
    op = SecondVariationOperator(model2d, inst2d_small)
    A = op.dense()
    N = A.shape[0]
    det_dense = np.linalg.det(np.eye(N) - A)
    det_eig = np.prod(1 - np.linalg.eigvalsh(0.5 * (A + A.T)))
    sr = dominant_eigenpairs(op, N - 1, tol=1e-10)
    d1, d2 = rel(det_eig, det_dense), rel(sr.partial_products[-1], det_dense)
    ok = N == 102 and d1 <= 1e-8 and d2 <= 1e-8
    acceptance_line(7, ok, f"dense {N}x{N}: det {det_dense:.10f}, eigen-product rel {d1:.1e}, "
                           f"matrix-free product rel {d2:.1e} (<=1e-8)")
    assert ok


def test_c8_property_suite(acceptance_line, model2d):
    out = {}
    # adjoint gradient against central differences
    g = make_grid(1.0, 200, "rk2_if")
    cfg = IntegratorConfig("rk2_if")
    rng = np.random.default_rng(0)
    t = g.nodes[:, None]
    eta = Path(g, 0.5 * (rng.normal(size=2) + rng.normal(size=2) * np.sin(3 * t)))
    d = Path(g, rng.normal(size=2) + rng.normal(size=2) * np.cos(5 * t))
    exact = float(np.dot(g.weights, np.sum(gradient(model2d, eta, 1.3, cfg).values * d.values, axis=1)))

    def F(e):
        return float(model2d.observable(solve_state(model2d, e, cfg).values[-1]))

    errs = []
    for h in (1e-2, 1e-3, 1e-4):
        fd = 1.3 * (F(Path(g, eta.values + h * d.values)) - F(Path(g, eta.values - h * d.values))) / (2 * h)
        errs.append(rel(fd, exact))
    out["grad"] = errs[-1] <= 1e-6 and errs[0] / errs[1] > 50
    # projection idempotence
    x = Path(g, rng.normal(size=(201, 2)))
    px = project_orthogonal(x, eta)
    idem = l2_norm(Path(g, project_orthogonal(px, eta).values - px.values)) / l2_norm(x)
    out["proj"] = idem <= 1e-12
    # symmetry, checkpointing, boundary condition and covariance routes at dt = 5e-4 (Heun)
    inst = solve_instanton(model2d, InstantonConfig(3.0, n_t=2000, scheme="rk2_if"))
    op = SecondVariationOperator(model2d, inst)
    u, v = Path(inst.grid, rng.normal(size=(2001, 2))), Path(inst.grid, rng.normal(size=(2001, 2)))
    from sharptail.core import l2_inner
    sym = abs(l2_inner(u, op.apply(v)) - l2_inner(op.apply(u), v)) / (l2_norm(u) * l2_norm(v))
    out["sym"] = sym <= 1e-10
    plan = CheckpointPlan(inst.grid)
    stats = {}
    with _backend.force_python():
        direct = hessian_apply(model2d, inst.phi, inst.eta, inst.lam, u, inst.integrator)
        ck = checkpointed_apply(model2d, inst.eta, inst.lam, u, plan, inst.integrator, stats)
    ck_err = l2_norm(Path(inst.grid, ck.values - direct.values)) / l2_norm(direct)
    cap = 2 * int(np.ceil(np.log2(2000))) + 2
    out["ckpt"] = ck_err <= 1e-12 and stats["peak_snapshots"] <= cap
    sr = dominant_eigenpairs(op, 200)
    tm = build_tube(model2d, inst, sr)
    bc = float(np.max(boundary_residuals(tm)))
    out["bc"] = bc <= 1e-8
    C_eig = covariance_at(tm, 1.0)
    C_ric = final_time_covariance_riccati(solve_riccati(model2d, inst, RiccatiConfig(store_path=False)))
    cov = np.linalg.norm(C_eig - C_ric) / np.linalg.norm(C_ric)
    out["cov"] = cov <= 1e-3
    ok = all(out.values())
    acceptance_line(8, ok, f"gradient FD {errs[-1]:.1e} (h^2 ratio {errs[0] / errs[1]:.0f}), symmetry {sym:.1e}, "
                           f"idempotence {idem:.1e}, checkpoint {ck_err:.1e} with {stats['peak_snapshots']}<={cap} "
                           f"snapshots, boundary {bc:.1e}, covariance routes {cov:.1e}")
    assert ok


def test_c9_tube_vs_sampling(acceptance_line, model2d):
    # Heun on a 1000-step grid keeps 1e5 accepted paths inside the runtime budget on one core
    inst = solve_instanton(model2d, InstantonConfig(3.0, n_t=1000, scheme="rk2_if"))
    tm = build_tube(model2d, inst, dominant_eigenpairs(SecondVariationOperator(model2d, inst), 100))
    times = (0.25, 0.5, 0.75)
    t0 = time.perf_counter()
    S = importance_sampled_paths(model2d, inst, McConfig(0.5, 100_000, seed=11, scheme="heun", record_times=times))
    secs = time.perf_counter() - t0
    zmax, cmax = 0.0, 0.0
    for k, t in enumerate(times):
        m, C, se = S.moments(k)
        zmax = max(zmax, float(np.max(np.abs(m - S.phi[k]) / se)))
        ref = 0.5 * covariance_at(tm, t)
        cmax = max(cmax, float(np.linalg.norm(C - ref) / np.linalg.norm(ref)))
    ok = S.n_accepted == 100_000 and zmax <= 3 and cmax <= 0.1 and secs <= 600
    acceptance_line(9, ok, f"{S.n_accepted} conditioned paths: max mean offset {zmax:.1f} SE (<=3), "
                           f"max covariance dev {cmax:.3f} (<=0.10), {secs:.0f} s")
    assert ok


def test_c10_not_reproducible(acceptance_line):
    acceptance_line(10, "NOT REPRODUCIBLE", "3D Navier-Stokes instanton/prefactor (GPU-scale) and the 1.2e7-sample "
                                            "MC run are out of desk scale; criterion 8 covers their mechanisms")
    pytest.skip("excluded: not reproducible at desk scale")
