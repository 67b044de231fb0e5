"""
Dirichlet negative log-likelihood in linear-predictor space and the Gaussian
pseudo-observations built from its second-order expansion.

For one observation with alpha = exp(eta) and alpha0 = sum(alpha):

    l(y | eta) = -log Gamma(alpha0) + sum log Gamma(alpha_c) - sum (alpha_c - 1) log y_c

Every Hessian block is factorized as H = L L^T with L lower triangular. When
the exact Hessian is not positive definite the expected Hessian (the Fisher
information, always PSD) is used for that block instead.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy import linalg, sparse

from compositional_core import CompositionMatrix, as_composition, digamma, log_gamma, trigamma
from exceptions import NonPositiveDefiniteError, NumericRangeError, ShapeError

logger = logging.getLogger(__name__)

ETA_GUARD = 700.0
PIVOT_RTOL = 1e-12
JITTER_RTOL = 1e-8


class HessianKind(str, Enum):
    EXACT = 'exact'
    EXPECTED = 'expected'
    JITTERED = 'expected+jitter'


def check_predictor(eta) -> np.ndarray:
    """Return eta as floats, raising when exp(eta) would leave the safe range"""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericRangeError("Linear predictor has non-finite entries")
    worst = float(np.max(np.abs(eta))) if eta.size else 0.0
    if worst > ETA_GUARD:
        raise NumericRangeError(f"|eta| = {worst:.6g} exceeds the overflow guard {ETA_GUARD:g}")
    return eta


# ---------------------------------------------------------------------------
# Batched kernels: rows are observations, columns are categories
# ---------------------------------------------------------------------------

def neg_log_lik_rows(y_rows: np.ndarray, eta_rows: np.ndarray) -> np.ndarray:
    """Per-observation negative log-likelihood, shape (N,)"""
    alpha = np.exp(check_predictor(eta_rows))
    alpha0 = alpha.sum(axis=-1)
    return (
        -log_gamma(alpha0)
        + log_gamma(alpha).sum(axis=-1)
        - ((alpha - 1.0) * np.log(y_rows)).sum(axis=-1)
    )


def gradient_rows(y_rows: np.ndarray, eta_rows: np.ndarray) -> np.ndarray:
    """Per-observation gradients with respect to eta, shape (N, C)"""
    alpha = np.exp(check_predictor(eta_rows))
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    return alpha * (digamma(alpha) - digamma(alpha0)) - alpha * np.log(y_rows)


def _off_diagonal_part(alpha: np.ndarray) -> np.ndarray:
    alpha0 = alpha.sum(axis=-1)
    return -alpha[..., :, None] * alpha[..., None, :] * trigamma(alpha0)[..., None, None]


def hessian_rows(y_rows: np.ndarray, eta_rows: np.ndarray) -> np.ndarray:
    """Per-observation exact Hessians, shape (N, C, C)"""
    alpha = np.exp(check_predictor(eta_rows))
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    H = _off_diagonal_part(alpha)
    diag = (
        alpha * (digamma(alpha) - digamma(alpha0))
        + alpha ** 2 * trigamma(alpha)
        - alpha * np.log(y_rows)
    )
    idx = np.arange(alpha.shape[-1])
    H[..., idx, idx] += diag
    return H


def expected_hessian_rows(eta_rows: np.ndarray) -> np.ndarray:
    """Per-observation Fisher information in eta space, shape (N, C, C)"""
    alpha = np.exp(check_predictor(eta_rows))
    H = _off_diagonal_part(alpha)
    idx = np.arange(alpha.shape[-1])
    H[..., idx, idx] += alpha ** 2 * trigamma(alpha)
    return H


# ---------------------------------------------------------------------------
# Single-observation operations
# ---------------------------------------------------------------------------

def _single(y, eta) -> Tuple[np.ndarray, np.ndarray]:
    y = as_composition(y)
    eta = check_predictor(eta)
    if eta.shape != y.shape:
        raise ShapeError(f"eta has shape {eta.shape} but y has shape {y.shape}")
    return y[None, :], eta[None, :]


def neg_log_lik(y, eta) -> float:
    """-log p(y | alpha = exp(eta))"""
    y_row, eta_row = _single(y, eta)
    return float(neg_log_lik_rows(y_row, eta_row)[0])


def gradient(y, eta) -> np.ndarray:
    y_row, eta_row = _single(y, eta)
    return gradient_rows(y_row, eta_row)[0]


def hessian(y, eta) -> np.ndarray:
    y_row, eta_row = _single(y, eta)
    return hessian_rows(y_row, eta_row)[0]


def expected_hessian(eta) -> np.ndarray:
    eta = check_predictor(eta)
    if eta.ndim != 1:
        raise ShapeError(f"eta must be a vector, got shape {eta.shape}")
    return expected_hessian_rows(eta[None, :])[0]


@dataclass(frozen=True)
class ObservationDerivatives:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    hessian_kind: HessianKind


def observation_derivatives(y, eta, kind: HessianKind = HessianKind.EXACT) -> ObservationDerivatives:
    y_row, eta_row = _single(y, eta)
    H = hessian_rows(y_row, eta_row)[0] if kind == HessianKind.EXACT else expected_hessian_rows(eta_row)[0]
    return ObservationDerivatives(
        value=float(neg_log_lik_rows(y_row, eta_row)[0]),
        gradient=gradient_rows(y_row, eta_row)[0],
        hessian=H,
        hessian_kind=kind,
    )


# ---------------------------------------------------------------------------
# Cholesky with expected-Hessian fallback
# ---------------------------------------------------------------------------

def _pivots_ok(L: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Pivot test relative to the mean diagonal, for one or many blocks"""
    C = H.shape[-1]
    scale = np.asarray(np.trace(H, axis1=-2, axis2=-1) / C)
    pivots = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    return np.all(pivots > PIVOT_RTOL * np.abs(scale)[..., None], axis=-1) & (scale > 0)


def try_cholesky(H: np.ndarray):
    """Lower Cholesky factor of H, or None if H is not numerically PD"""
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    if not _pivots_ok(L, H):
        return None
    return L


def _factor_expected(H_expected: np.ndarray) -> Tuple[np.ndarray, np.ndarray, HessianKind]:
    L = try_cholesky(H_expected)
    if L is not None:
        return L, H_expected, HessianKind.EXPECTED
    C = H_expected.shape[-1]
    jitter = JITTER_RTOL * abs(np.trace(H_expected)) / C
    H_jittered = H_expected + jitter * np.eye(C)
    L = try_cholesky(H_jittered)
    if L is None:
        raise NonPositiveDefiniteError(
            "Expected Hessian is not positive definite even after jitter "
            f"(jitter {jitter:.3g})"
        )
    return L, H_jittered, HessianKind.JITTERED


def block_cholesky_with_fallback(y, eta) -> Tuple[np.ndarray, HessianKind]:
    """Factor the exact Hessian, or the expected Hessian when the exact one is not PD"""
    y_row, eta_row = _single(y, eta)
    L, _, kind = factor_rows(y_row, eta_row)
    return L[0], kind[0]


def factor_rows(y_rows: np.ndarray, eta_rows: np.ndarray,
                use_expected: bool = False) -> Tuple[np.ndarray, np.ndarray, List[HessianKind]]:
    """Factor every observation's Hessian block.

    Returns (L, H, kinds) where L @ L^T reproduces H block by block. With
    use_expected=True every block uses the expected Hessian.
    """
    H_expected = expected_hessian_rows(eta_rows)
    if use_expected:
        H = H_expected.copy()
    else:
        H = hessian_rows(y_rows, eta_rows)
    N, C, _ = H.shape
    kinds = [HessianKind.EXPECTED if use_expected else HessianKind.EXACT] * N

    try:
        L = np.linalg.cholesky(H)
        ok = _pivots_ok(L, H)
    except np.linalg.LinAlgError:
        L = np.zeros_like(H)
        ok = np.zeros(N, dtype=bool)
        for n in range(N):
            Ln = try_cholesky(H[n])
            if Ln is not None:
                L[n] = Ln
                ok[n] = True

    for n in np.flatnonzero(~ok):
        L[n], H[n], kinds[n] = _factor_expected(H_expected[n])
    return L, H, kinds


# ---------------------------------------------------------------------------
# Pseudo-observations
# ---------------------------------------------------------------------------

def pseudo_observation_block(L: np.ndarray, eta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """z = L^T eta - L^{-1} g, with a triangular solve"""
    return L.T @ eta - linalg.solve_triangular(L, grad, lower=True)


@dataclass(frozen=True)
class PseudoObservationSet:
    """Gaussian pseudo-observations z0 ~ N(L0^T eta, I), one C-block per observation"""

    z0: np.ndarray
    cholesky_blocks: np.ndarray
    hessian_blocks: np.ndarray
    gradient_blocks: np.ndarray
    values: np.ndarray
    eta0: np.ndarray
    kinds: Tuple[HessianKind, ...]
    fallback_count: int

    @property
    def n_obs(self) -> int:
        return self.cholesky_blocks.shape[0]

    @property
    def n_categories(self) -> int:
        return self.cholesky_blocks.shape[1]

    def whitened_gradients(self) -> np.ndarray:
        """L^{-1} g per block, shape (N, C)"""
        return np.stack([
            linalg.solve_triangular(L, g, lower=True)
            for L, g in zip(self.cholesky_blocks, self.gradient_blocks)
        ])

    def constants(self) -> np.ndarray:
        """l(y_n | eta0_n) - g^T H^{-1} g / 2 per observation"""
        w = self.whitened_gradients()
        return self.values - 0.5 * np.sum(w ** 2, axis=1)

    def _residuals(self, eta_tilde: np.ndarray) -> np.ndarray:
        N, C = self.n_obs, self.n_categories
        eta = np.asarray(eta_tilde, dtype=float).reshape(N, C)
        fitted = np.einsum('nkc,nk->nc', self.cholesky_blocks, eta)
        return self.z0.reshape(N, C) - fitted

    def quadratic_value(self, eta_tilde: np.ndarray) -> float:
        """Sum of constants plus ||z0 - L0^T eta||^2 / 2"""
        r = self._residuals(eta_tilde)
        return float(np.sum(self.constants()) + 0.5 * np.sum(r ** 2))

    def quadratic_gradient(self, eta_tilde: np.ndarray) -> np.ndarray:
        r = self._residuals(eta_tilde)
        return -np.einsum('nck,nk->nc', self.cholesky_blocks, r).reshape(-1)

    def block_factor(self) -> sparse.csr_matrix:
        """Block-diagonal L0 as a sparse (C N) x (C N) matrix"""
        return sparse.block_diag(list(self.cholesky_blocks), format='csr')

    def block_hessian(self) -> sparse.csr_matrix:
        return sparse.block_diag(list(self.hessian_blocks), format='csr')


def _rows_from(Y, eta_tilde) -> Tuple[np.ndarray, np.ndarray]:
    data = Y.data if isinstance(Y, CompositionMatrix) else np.asarray(Y, dtype=float)
    C, N = data.shape
    eta_tilde = np.asarray(eta_tilde, dtype=float)
    if eta_tilde.shape != (C * N,):
        raise ShapeError(f"eta_tilde has shape {eta_tilde.shape}, expected ({C * N},)")
    return data.T, eta_tilde.reshape(N, C)


def pseudo_observations(Y, eta_tilde: np.ndarray, use_expected: bool = False) -> PseudoObservationSet:
    """Linearize the likelihood at eta_tilde into Gaussian pseudo-observations"""
    y_rows, eta_rows = _rows_from(Y, eta_tilde)
    L, H, kinds = factor_rows(y_rows, eta_rows, use_expected=use_expected)
    g = gradient_rows(y_rows, eta_rows)
    values = neg_log_lik_rows(y_rows, eta_rows)

    z0 = np.concatenate([
        pseudo_observation_block(L[n], eta_rows[n], g[n]) for n in range(L.shape[0])
    ])
    fallback_count = sum(kind != HessianKind.EXACT for kind in kinds) if not use_expected else len(kinds)
    if fallback_count and not use_expected:
        logger.debug(f"Expected Hessian used for {fallback_count} of {len(kinds)} observations")
    return PseudoObservationSet(
        z0=z0,
        cholesky_blocks=L,
        hessian_blocks=H,
        gradient_blocks=g,
        values=values,
        eta0=eta_rows.reshape(-1).copy(),
        kinds=tuple(kinds),
        fallback_count=int(fallback_count),
    )
