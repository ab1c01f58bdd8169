import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharptail.core import Path, TimeGrid, l2_inner, l2_norm, project_orthogonal
from sharptail.errors import DimensionError, SingularInstantonError
from sharptail.problems import KdvConfig, make_kdv, make_model2d, make_ou

finite = st.floats(-10, 10, allow_nan=False)


def test_grid_rejects_degenerate():
    with pytest.raises(DimensionError):
        TimeGrid.uniform(1.0, 1)
    with pytest.raises(DimensionError):
        TimeGrid([0.0, 0.5, 0.4, 1.0])
    with pytest.raises(DimensionError):
        TimeGrid([0.1, 0.5, 1.0])


@pytest.mark.parametrize("rule", ["trapezoid", "left"])
def test_grid_weights_sum_to_horizon(rule):
    t = np.sort(np.random.default_rng(0).uniform(0, 2.5, 40))
    g = TimeGrid(np.concatenate([[0.0], t, [2.5]]), rule)
    assert np.all(g.weights >= 0)
    assert g.weights.sum() == pytest.approx(2.5, abs=1e-14)
    assert g.T == 2.5 and not g.is_uniform


def test_grid_immutable():
    g = TimeGrid.uniform(1.0, 10)
    with pytest.raises(AttributeError):
        g.rule = "left"
    with pytest.raises(ValueError):
        g.nodes[0] = 1.0


def test_l2_inner_examples(model2d, inst2d_rk2):
    g = TimeGrid.uniform(1.0, 10)
    one = Path(g, np.ones(11))
    assert l2_inner(one, one) == pytest.approx(1.0, abs=1e-15)
    assert l2_inner(Path.zeros(g, 1), Path(g, np.linspace(0, 1, 11))) == 0.0
    eta = inst2d_rk2.eta
    assert l2_inner(eta, eta) == pytest.approx(2 * inst2d_rk2.rate, rel=1e-12)


def test_l2_inner_mismatch():
    g1, g2 = TimeGrid.uniform(1.0, 10), TimeGrid.uniform(1.0, 12)
    with pytest.raises(DimensionError):
        l2_inner(Path.zeros(g1, 1), Path.zeros(g2, 1))
    with pytest.raises(DimensionError):
        l2_inner(Path.zeros(g1, 1), Path.zeros(g1, 2))


def test_trapezoid_second_order():
    errs = []
    for n in (16, 32, 64):
        g = TimeGrid.uniform(1.0, n)
        p = Path(g, np.sin(3 * g.nodes))
        exact = 0.5 - np.sin(6) / 12
        errs.append(abs(l2_inner(p, p) - exact))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.9)


def test_projection_examples():
    g = TimeGrid.uniform(1.0, 10)
    rng = np.random.default_rng(1)
    eta = Path(g, rng.normal(size=(11, 2)))
    assert l2_norm(project_orthogonal(eta, eta)) < 1e-14 * l2_norm(eta)
    d = project_orthogonal(Path(g, rng.normal(size=(11, 2))), eta)
    assert np.allclose(project_orthogonal(d, eta).values, d.values, rtol=0, atol=1e-14)
    with pytest.raises(SingularInstantonError):
        project_orthogonal(d, Path.zeros(g, 2))


def test_projection_dense_oracle():
    g = TimeGrid.uniform(1.0, 10)
    rng = np.random.default_rng(2)
    eta, d = rng.normal(size=(11, 2)), rng.normal(size=(11, 2))
    W = np.kron(np.diag(g.weights), np.eye(2))
    e = eta.reshape(-1)
    P = np.eye(22) - np.outer(e, e) @ W / (e @ W @ e)
    out = project_orthogonal(Path(g, d), Path(g, eta)).values.reshape(-1)
    assert np.allclose(out, P @ d.reshape(-1), atol=1e-14)


@given(arrays(np.float64, (9, 2), elements=finite), arrays(np.float64, (9, 2), elements=finite))
def test_projection_properties(x, e):
    g = TimeGrid(np.linspace(0, 1, 9) ** 1.5)
    eta = Path(g, e)
    if l2_norm(eta) < 1e-3:
        return
    px = project_orthogonal(Path(g, x), eta)
    ppx = project_orthogonal(px, eta)
    scale = l2_norm(Path(g, x)) * l2_norm(eta)
    assert abs(l2_inner(eta, px)) <= 1e-12 * max(scale, 1e-300) + 1e-300
    assert l2_norm(Path(g, ppx.values - px.values)) <= 1e-12 * max(l2_norm(px), l2_norm(Path(g, x))) + 1e-300


@given(arrays(np.float64, (6, 3), elements=finite), arrays(np.float64, (6, 3), elements=finite),
       st.floats(-3, 3), st.floats(-3, 3))
def test_l2_inner_bilinear_symmetric(a, b, s, t):
    g = TimeGrid.uniform(2.0, 5)
    p, q, r = Path(g, a), Path(g, b), Path(g, a * b)
    assert l2_inner(p, q) == pytest.approx(l2_inner(q, p), rel=1e-14, abs=1e-12)
    lhs = l2_inner(Path(g, s * a + t * b), r)
    assert lhs == pytest.approx(s * l2_inner(p, r) + t * l2_inner(q, r), rel=1e-9, abs=1e-9)
    assert l2_inner(p, p) >= 0


def test_path_shape_checks():
    g = TimeGrid.uniform(1.0, 4)
    with pytest.raises(DimensionError):
        Path(g, np.zeros((4, 2)))
    assert Path(g, np.zeros(5)).width == 1


def _specs():
    return [make_model2d(), make_ou(0.7, 1.0), make_kdv(KdvConfig(32, 10))]


@pytest.mark.parametrize("spec", _specs(), ids=["model2d", "ou", "kdv"])
def test_spec_consistency(spec):
    rng = np.random.default_rng(3)
    n, r = spec.state_dim, spec.noise_rank
    x, v, th = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
    h = 1e-5
    fd = (spec.drift(x + h * v) - spec.drift(x - h * v)) / (2 * h)
    assert np.allclose(fd, spec.jacobian_action(x, v), rtol=1e-7, atol=1e-7)
    a = rng.normal(size=n)
    assert spec.jacobian_action(x, v) @ a == pytest.approx(v @ spec.jacobian_adjoint(x, a), rel=1e-10, abs=1e-10)
    w = rng.normal(size=r)
    assert spec.sigma_apply(w) @ v == pytest.approx(w @ spec.sigma_adjoint(v), rel=1e-12, abs=1e-12)
    # <Hess N, th> is symmetric and consistent with the Jacobian adjoint
    u = rng.normal(size=n)
    assert u @ spec.hessian_bilinear(x, th, v) == pytest.approx(v @ spec.hessian_bilinear(x, th, u), rel=1e-9,
                                                                 abs=1e-9)
    fd2 = (spec.nonlinear_jac_t(x + h * v, th) - spec.nonlinear_jac_t(x - h * v, th)) / (2 * h)
    assert np.allclose(fd2, spec.hessian_bilinear(x, th, v), rtol=1e-6, atol=1e-6)


def test_model2d_examples(model2d):
    assert np.allclose(model2d.drift(np.zeros(2)), 0)
    assert np.allclose(model2d.drift(np.array([1.0, 1.0])), [-2.0, -3.0])
    th = np.array([0.7, -1.3])
    M = np.array([[2 * th[1], -th[0]], [-th[0], 0.0]])
    g = np.array([0.4, 2.0])
    assert np.allclose(model2d.hessian_bilinear(np.zeros(2), th, g), M @ g)
    assert np.allclose(model2d.diffusion_matrix(), np.diag([1.0, 0.25]))
    assert model2d.observable(np.array([1.0, 1.0])) == 3.0


def test_ou_meta():
    spec = make_ou(1.0, 1.0)
    a = spec.meta["analytic"](1.0)
    assert a["Sigma"] == pytest.approx(0.432332, abs=1e-6)
    assert a["I_F"] == pytest.approx(1.156518, abs=1e-6)
