#!/usr/bin/env python3
"""
Tests for the Dirichlet likelihood in eta space, its derivatives, the
block Cholesky fallback and the pseudo-observations
"""

import numpy as np
import pytest

from compositional_core import CompositionMatrix, DirichletParams, log_density, sample_dirichlet
from dirichlet_likelihood import (
    ETA_GUARD, HessianKind, block_cholesky_with_fallback, expected_hessian, factor_rows, gradient,
    hessian, hessian_rows, neg_log_lik, observation_derivatives, pseudo_observations,
)
from exceptions import NumericRangeError, ShapeError

TRIGAMMA_1 = np.pi ** 2 / 6
TRIGAMMA_2 = TRIGAMMA_1 - 1.0


def test_neg_log_lik_matches_density():
    y = np.array([0.2, 0.3, 0.5])
    eta = np.array([0.1, -0.4, 0.7])
    expected = -log_density(y, DirichletParams(np.exp(eta)))
    assert neg_log_lik(y, eta) == pytest.approx(expected, rel=1e-12)


def test_gradient_at_zero_predictor():
    g = gradient([0.3, 0.7], [0.0, 0.0])
    np.testing.assert_allclose(g, [0.203973, -0.643325], atol=1e-6)


def test_gradient_matches_finite_differences():
    y = np.array([0.15, 0.25, 0.6])
    eta = np.array([0.3, -0.2, 1.1])
    h = 1e-6
    numeric = np.array([
        (neg_log_lik(y, eta + h * e) - neg_log_lik(y, eta - h * e)) / (2 * h) for e in np.eye(3)
    ])
    np.testing.assert_allclose(gradient(y, eta), numeric, rtol=1e-6, atol=1e-8)


def test_hessian_matches_finite_differences():
    y = np.array([0.15, 0.25, 0.6])
    eta = np.array([0.3, -0.2, 1.1])
    h = 1e-5
    numeric = np.stack([
        (gradient(y, eta + h * e) - gradient(y, eta - h * e)) / (2 * h) for e in np.eye(3)
    ])
    H = hessian(y, eta)
    np.testing.assert_allclose(H, H.T)
    np.testing.assert_allclose(H, numeric, rtol=1e-5, atol=1e-7)


def test_hessian_off_diagonal_at_zero_predictor():
    H = hessian([0.3, 0.7], [0.0, 0.0])
    assert H[0, 1] == pytest.approx(-TRIGAMMA_2, abs=1e-6)
    assert H[0, 1] == pytest.approx(-0.644934, abs=1e-6)


def test_expected_hessian_factor():
    E = expected_hessian(np.array([0.0, 0.0]))
    np.testing.assert_allclose(E, [[1.0, -TRIGAMMA_2], [-TRIGAMMA_2, 1.0]], atol=1e-12)
    L = np.linalg.cholesky(E)
    np.testing.assert_allclose(L, [[1.0, 0.0], [-0.644934, np.sqrt(1.0 - TRIGAMMA_2 ** 2)]], atol=1e-6)


def test_expected_hessian_is_average_of_exact_hessian():
    eta = np.array([0.5, 1.0, -0.3])
    draws = sample_dirichlet(DirichletParams(np.exp(eta)), 40000, rng_seed=21).to_rows()
    H_mean = hessian_rows(draws, np.tile(eta, (draws.shape[0], 1))).mean(axis=0)
    np.testing.assert_allclose(H_mean, expected_hessian(eta), atol=0.03)


def test_check_predictor_guard():
    with pytest.raises(NumericRangeError):
        neg_log_lik([0.5, 0.5], [ETA_GUARD + 1.0, 0.0])
    with pytest.raises(NumericRangeError):
        gradient([0.5, 0.5], [np.nan, 0.0])


def test_single_observation_shape_mismatch():
    with pytest.raises(ShapeError):
        gradient([0.5, 0.5], [0.0, 0.0, 0.0])


def test_cholesky_uses_exact_hessian_when_positive_definite():
    L, kind = block_cholesky_with_fallback([0.3, 0.7], [0.0, 0.0])
    assert kind == HessianKind.EXACT
    np.testing.assert_allclose(L @ L.T, hessian([0.3, 0.7], [0.0, 0.0]), atol=1e-12)


def test_cholesky_falls_back_near_a_vertex():
    y = [1.0 - 1e-6, 1e-6]
    L, kind = block_cholesky_with_fallback(y, [0.0, 0.0])
    assert kind in (HessianKind.EXPECTED, HessianKind.JITTERED)
    np.testing.assert_allclose(L @ L.T, expected_hessian(np.zeros(2)), atol=1e-6)
    assert np.all(np.diag(L) > 0)


def test_factor_rows_mixes_exact_and_fallback_blocks():
    y_rows = np.array([[0.3, 0.7], [1.0 - 1e-6, 1e-6]])
    eta_rows = np.zeros((2, 2))
    L, H, kinds = factor_rows(y_rows, eta_rows)
    assert kinds[0] == HessianKind.EXACT
    assert kinds[1] != HessianKind.EXACT
    for n in range(2):
        np.testing.assert_allclose(L[n] @ L[n].T, H[n], atol=1e-10)


def test_observation_derivatives_expected_kind():
    result = observation_derivatives([0.3, 0.7], [0.0, 0.0], kind=HessianKind.EXPECTED)
    np.testing.assert_allclose(result.hessian, expected_hessian(np.zeros(2)))
    assert result.value == pytest.approx(neg_log_lik([0.3, 0.7], [0.0, 0.0]))


def test_pseudo_observations_reproduce_quadratic_expansion():
    Y = CompositionMatrix(np.array([[0.2, 0.6, 0.35], [0.5, 0.1, 0.3], [0.3, 0.3, 0.35]]))
    eta0 = np.array([0.1, 0.4, -0.2, 0.6, 0.0, 0.3, -0.1, 0.2, 0.5])
    pseudo = pseudo_observations(Y, eta0)
    assert pseudo.z0.shape == (9,)

    # at the expansion point the quadratic matches the exact value and gradient
    exact = sum(neg_log_lik(Y.column(n), eta0[3 * n:3 * n + 3]) for n in range(3))
    assert pseudo.quadratic_value(eta0) == pytest.approx(exact, rel=1e-10)
    np.testing.assert_allclose(pseudo.quadratic_gradient(eta0), pseudo.gradient_blocks.reshape(-1), atol=1e-10)

    # and its curvature is the block Hessian
    step = np.linspace(-0.05, 0.05, 9)
    H = pseudo.block_hessian().toarray()
    expected = pseudo.quadratic_value(eta0) + pseudo.gradient_blocks.reshape(-1) @ step + 0.5 * step @ H @ step
    assert pseudo.quadratic_value(eta0 + step) == pytest.approx(expected, rel=1e-10)


def test_pseudo_observations_expected_mode_counts_every_block():
    Y = CompositionMatrix(np.array([[0.3, 0.6], [0.7, 0.4]]))
    pseudo = pseudo_observations(Y, np.zeros(4), use_expected=True)
    assert pseudo.fallback_count == 2
    assert all(kind == HessianKind.EXPECTED for kind in pseudo.kinds)


def test_pseudo_observations_shape_check():
    Y = CompositionMatrix(np.array([[0.3, 0.6], [0.7, 0.4]]))
    with pytest.raises(ShapeError):
        pseudo_observations(Y, np.zeros(3))


def test_derivatives_on_random_instances():
    rng = np.random.default_rng(500)
    for _ in range(500):
        C = int(rng.integers(2, 7))
        eta = rng.uniform(-3.0, 3.0, C)
        y = rng.dirichlet(np.ones(C) * 2.0)
        y = np.clip(y, 1e-6, None)
        y /= y.sum()

        h = 1e-6 * max(1.0, np.max(np.abs(eta)))
        fd_grad = np.array([
            (neg_log_lik(y, eta + h * e) - neg_log_lik(y, eta - h * e)) / (2 * h) for e in np.eye(C)
        ])
        g = gradient(y, eta)
        assert np.max(np.abs(g - fd_grad)) <= 1e-6 * max(1.0, np.max(np.abs(g)))

        h = 1e-5
        fd_hess = np.stack([
            (gradient(y, eta + h * e) - gradient(y, eta - h * e)) / (2 * h) for e in np.eye(C)
        ])
        H = hessian(y, eta)
        assert np.max(np.abs(H - fd_hess)) <= 1e-5 * max(1.0, np.max(np.abs(H)))


def test_expected_hessian_is_positive_semidefinite():
    rng = np.random.default_rng(1000)
    for _ in range(1000):
        C = int(rng.integers(2, 7))
        E = expected_hessian(rng.uniform(-3.0, 3.0, C))
        np.testing.assert_allclose(E, E.T)
        assert np.linalg.eigvalsh(E).min() >= -1e-10


def random_compositions(rng, n_cat, n_obs):
    Y = rng.dirichlet(np.full(n_cat, 2.0), size=n_obs)
    Y = np.clip(Y, 1e-6, None)
    return CompositionMatrix((Y / Y.sum(axis=1, keepdims=True)).T)


def test_quadratic_reconstruction_on_random_instances():
    rng = np.random.default_rng(77)
    for _ in range(100):
        C, N = int(rng.integers(2, 7)), int(rng.integers(1, 6))
        Y = random_compositions(rng, C, N)
        eta0 = rng.uniform(-3.0, 3.0, C * N)
        pseudo = pseudo_observations(Y, eta0)

        blocks = eta0.reshape(N, C)
        exact_value = sum(neg_log_lik(Y.column(n), blocks[n]) for n in range(N))
        exact_grad = np.concatenate([gradient(Y.column(n), blocks[n]) for n in range(N)])
        assert pseudo.quadratic_value(eta0) == pytest.approx(exact_value, rel=1e-9, abs=1e-9)
        np.testing.assert_allclose(pseudo.quadratic_gradient(eta0), exact_grad, rtol=1e-9, atol=1e-9)

        for n, kind in enumerate(pseudo.kinds):
            L = pseudo.cholesky_blocks[n]
            if kind == HessianKind.EXACT:
                np.testing.assert_allclose(L @ L.T, hessian(Y.column(n), blocks[n]), rtol=1e-9, atol=1e-9)
            elif kind == HessianKind.EXPECTED:
                np.testing.assert_allclose(L @ L.T, expected_hessian(blocks[n]), rtol=1e-9, atol=1e-9)


def test_pseudo_observation_blocks_follow_permuted_observations():
    rng = np.random.default_rng(31)
    C, N = 4, 12
    Y = random_compositions(rng, C, N)
    eta0 = rng.uniform(-2.0, 2.0, C * N)
    order = rng.permutation(N)

    pseudo = pseudo_observations(Y, eta0)
    permuted = pseudo_observations(
        CompositionMatrix(Y.data[:, order]), eta0.reshape(N, C)[order].reshape(-1)
    )
    np.testing.assert_allclose(permuted.z0.reshape(N, C), pseudo.z0.reshape(N, C)[order], rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(permuted.cholesky_blocks, pseudo.cholesky_blocks[order], rtol=1e-13, atol=1e-13)
    assert list(permuted.kinds) == [pseudo.kinds[i] for i in order]
