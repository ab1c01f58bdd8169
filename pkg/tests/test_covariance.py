import dataclasses

import numpy as np
import pytest

from sharptail.covariance import (boundary_residuals, build_tube, covariance_at, sample_tube_endpoint,
                                  tube_marginal)
from sharptail.errors import ConfigError
from sharptail.riccati import final_time_covariance_riccati, solve_riccati
from sharptail.second_variation import SecondVariationOperator
from sharptail.spectrum import dominant_eigenpairs


@pytest.fixture(scope="module")
def tube(model2d, inst2d_rk2):
    sr = dominant_eigenpairs(SecondVariationOperator(model2d, inst2d_rk2), 40)
    return build_tube(model2d, inst2d_rk2, sr)


def test_initial_covariance_vanishes(tube):
    assert np.all(np.abs(covariance_at(tube, 0.0)) <= 1e-14)


def test_matches_riccati_route(model2d, inst2d_rk2, tube):
    C = covariance_at(tube, 1.0)
    R = final_time_covariance_riccati(solve_riccati(model2d, inst2d_rk2))
    assert np.linalg.norm(C - R) <= 1e-3 * np.linalg.norm(R)


def test_two_time_symmetry(tube):
    A = covariance_at(tube, 0.25, 0.75)
    B = covariance_at(tube, 0.75, 0.25)
    assert np.allclose(A, B.T, atol=1e-14)


def test_truncated_sum_monotone(tube):
    plain = dataclasses.replace(tube, remainder="none", _rep_cache={})
    prev = None
    for k in (5, 10, 20, 40):
        tk = dataclasses.replace(plain, eigenvalues=plain.eigenvalues[:k], modes=plain.modes[:k])
        C = covariance_at(tk, 0.5)
        if prev is not None:
            D = C - prev[1]
            assert np.all(np.linalg.eigvalsh(D) >= -1e-12)
            g = plain.modes[prev[0]:k, plain.slot(0.5)[1]]
            assert np.trace(D) <= np.sum(plain.weights[prev[0]:k] * np.sum(g * g, axis=1)) + 1e-12
        prev = (k, C)
    # the complement remainder closes the gap left by the truncated sum
    full = covariance_at(tube, 0.5)
    assert np.all(np.linalg.eigvalsh(full - prev[1]) >= -1e-10)


def test_boundary_residuals(tube):
    assert np.max(boundary_residuals(tube)) <= 1e-8


def test_tube_samples(model2d, inst2d_rk2, tube):
    eps, n = 0.5, 20000
    X = sample_tube_endpoint(tube, eps, 7, n)
    z = model2d.observable(X)
    assert np.max(np.abs(z - 3.0)) <= 1e-10
    mean, S = tube_marginal(tube, 1.0, eps)
    sd = np.sqrt(np.diag(S))
    assert np.all(np.abs(X.mean(axis=0) - mean) <= 4 * sd / np.sqrt(n))
    np.testing.assert_allclose(np.cov(X.T), S, atol=0.05 * np.max(np.abs(S)))
    assert np.array_equal(X, sample_tube_endpoint(tube, eps, 7, n))
    with pytest.raises(ConfigError):
        sample_tube_endpoint(tube, 0.0, 7, n)


def test_marginal_shrinks_with_eps(tube, inst2d_rk2):
    for eps in (1e-1, 1e-3, 1e-6):
        mean, S = tube_marginal(tube, 0.5, eps)
        assert np.array_equal(mean, inst2d_rk2.phi.values[250])
        assert np.linalg.norm(S) == pytest.approx(eps * np.linalg.norm(covariance_at(tube, 0.5)), rel=1e-12)


def test_ou_tube_is_degenerate(ou, inst_ou):
    sr = dominant_eigenpairs(SecondVariationOperator(ou, inst_ou), 5)
    tm = build_tube(ou, inst_ou, sr)
    assert abs(covariance_at(tm, 1.0)[0, 0]) <= 1e-10
    assert covariance_at(tm, 0.5)[0, 0] > 0


def test_stride(model2d, inst2d_rk2):
    sr = dominant_eigenpairs(SecondVariationOperator(model2d, inst2d_rk2), 10)
    tm = build_tube(model2d, inst2d_rk2, sr, stride=50)
    covariance_at(tm, 0.5)
    with pytest.raises(ConfigError):
        covariance_at(tm, 0.502)
    with pytest.raises(ConfigError):
        build_tube(model2d, inst2d_rk2, sr, stride=0)
