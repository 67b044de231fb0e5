"""
Dirichlet distribution fundamentals: special functions, density, moments,
sampling, simplex validation and the closed-interval compression transform.

Compositions are stored column-wise: a C x N array holds N observations of a
C-part composition, one observation per column.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import special

from exceptions import DomainError, ShapeError, SimplexError

logger = logging.getLogger(__name__)

# CSV round-trip noise must not reject real data
SIMPLEX_TOL_INPUT = 1e-8
SIMPLEX_TOL_INTERNAL = 1e-12

ArrayLike = Union[np.ndarray, list, tuple]


def log_gamma(x):
    """log Gamma(x), elementwise"""
    return special.gammaln(x)


def digamma(x):
    """First derivative of log Gamma, elementwise"""
    return special.digamma(x)


def trigamma(x):
    """Second derivative of log Gamma, elementwise"""
    return special.polygamma(1, x)


def check_simplex_columns(data: np.ndarray, tol: float = SIMPLEX_TOL_INPUT,
                          strict: bool = True) -> None:
    """Raise unless every column lies on the simplex.

    With strict=True entries must be in the open interval (0, 1), otherwise
    the closed interval [0, 1] is accepted.
    """
    if not np.all(np.isfinite(data)):
        row, col = np.argwhere(~np.isfinite(data))[0]
        raise DomainError(f"Non-finite entry at row {row}, column {col}")

    if strict:
        bad = (data <= 0.0) | (data >= 1.0)
        interval = "(0, 1)"
    else:
        bad = (data < 0.0) | (data > 1.0)
        interval = "[0, 1]"
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        raise DomainError(
            f"Entry {data[row, col]!r} at row {row}, column {col} is outside {interval}"
        )

    sums = data.sum(axis=0)
    off = np.abs(sums - 1.0) > tol
    if np.any(off):
        col = int(np.argmax(off))
        raise SimplexError(f"Column {col} sums to {sums[col]!r}, expected 1 (tol {tol:g})")


def as_composition(y: ArrayLike, tol: float = SIMPLEX_TOL_INPUT) -> np.ndarray:
    """Validate a single composition and return it as a float vector"""
    values = np.asarray(y, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ShapeError(f"A composition needs at least 2 parts, got shape {values.shape}")
    check_simplex_columns(values[:, None], tol=tol, strict=True)
    return values


@dataclass(frozen=True)
class CompositionMatrix:
    """C x N matrix of compositions, one observation per column"""

    data: np.ndarray
    tol: float = field(default=SIMPLEX_TOL_INPUT, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2:
            raise ShapeError(f"Composition matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 1:
            raise ShapeError(f"Need C >= 2 categories and N >= 1 observations, got {data.shape}")
        check_simplex_columns(data, tol=self.tol, strict=True)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def n_categories(self) -> int:
        return self.data.shape[0]

    @property
    def n_obs(self) -> int:
        return self.data.shape[1]

    def column(self, n: int) -> np.ndarray:
        return self.data[:, n]

    def to_rows(self) -> np.ndarray:
        return self.data.T.copy()


@dataclass(frozen=True)
class DirichletParams:
    """Shape vector alpha and its sum alpha0 (the precision)"""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ShapeError(f"alpha must be a non-empty vector, got shape {alpha.shape}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise DomainError(f"Every alpha must be finite and > 0, got {alpha}")
        alpha.setflags(write=False)
        object.__setattr__(self, 'alpha', alpha)

    @property
    def alpha0(self) -> float:
        return float(np.sum(self.alpha))

    @property
    def n_categories(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class DirichletMoments:
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray


def compress_value(y, n_obs: int, n_cat: int):
    """Elementwise open-interval compression y* = (y (N - 1) + 1/C) / N"""
    return (np.asarray(y, dtype=float) * (n_obs - 1) + 1.0 / n_cat) / n_obs


def transform_to_open_interval(y: ArrayLike, n_obs: Optional[int] = None,
                               n_cat: Optional[int] = None) -> CompositionMatrix:
    """Squeeze compositions with zeros or ones into the open simplex.

    `y` is C x N with entries in [0, 1] and unit column sums. The map is
    affine per entry and keeps column sums at one.
    """
    data = np.asarray(y.data if isinstance(y, CompositionMatrix) else y, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n_cat_actual, n_obs_actual = data.shape
    n_obs = n_obs_actual if n_obs is None else n_obs
    n_cat = n_cat_actual if n_cat is None else n_cat
    if (n_cat, n_obs) != (n_cat_actual, n_obs_actual):
        raise ShapeError(
            f"Declared C={n_cat}, N={n_obs} but data is {n_cat_actual} x {n_obs_actual}"
        )

    check_simplex_columns(data, tol=SIMPLEX_TOL_INPUT, strict=False)
    compressed = compress_value(data, n_obs, n_cat)
    return CompositionMatrix(compressed)


def needs_transform(y: ArrayLike) -> bool:
    """True when any entry sits on the boundary 0 or 1"""
    data = np.asarray(y, dtype=float)
    return bool(np.any((data <= 0.0) | (data >= 1.0)))


def log_density(y: ArrayLike, params: DirichletParams) -> float:
    """log p(y | alpha) for a single composition"""
    values = as_composition(y)
    if values.size != params.n_categories:
        raise ShapeError(
            f"Composition has {values.size} parts but alpha has {params.n_categories}"
        )
    alpha = params.alpha
    return float(
        log_gamma(params.alpha0)
        - np.sum(log_gamma(alpha))
        + np.sum((alpha - 1.0) * np.log(values))
    )


def moments(params: DirichletParams) -> DirichletMoments:
    """Mean, marginal variances and covariance matrix of a Dirichlet"""
    alpha = params.alpha
    alpha0 = params.alpha0
    mean = alpha / alpha0
    denom = alpha0 ** 2 * (alpha0 + 1.0)
    covariance = -np.outer(alpha, alpha) / denom
    variance = alpha * (alpha0 - alpha) / denom
    np.fill_diagonal(covariance, variance)
    return DirichletMoments(mean=mean, variance=variance, covariance=covariance)


def log_gamma_variates(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """log of independent Gamma(alpha, 1) variates, same shape as alpha.

    Shapes below one are boosted: G(a) = G(a + 1) * U^(1/a), evaluated in
    log space so tiny shapes do not underflow to exact zeros.
    """
    alpha = np.asarray(alpha, dtype=float)
    small = alpha < 1.0
    shape = np.where(small, alpha + 1.0, alpha)
    log_g = np.log(rng.gamma(shape))
    if np.any(small):
        u = rng.random(alpha.shape)
        log_g = np.where(small, log_g + np.log(u) / np.where(small, alpha, 1.0), log_g)
    return log_g


def normalize_log_weights(log_g: np.ndarray, axis: int = 0) -> np.ndarray:
    """Normalize log-gamma variates to the simplex along `axis`"""
    return np.exp(log_g - special.logsumexp(log_g, axis=axis, keepdims=True))


def sample_dirichlet(params: DirichletParams, n: int, rng_seed: int) -> CompositionMatrix:
    """Draw n compositions (C x n) from Dirichlet(alpha), reproducible by seed"""
    if n < 1:
        raise DomainError(f"Sample size must be >= 1, got {n}")
    rng = np.random.default_rng(rng_seed)
    alpha = np.broadcast_to(params.alpha[:, None], (params.n_categories, n))
    draws = normalize_log_weights(log_gamma_variates(alpha, rng), axis=0)
    return CompositionMatrix(draws, tol=SIMPLEX_TOL_INTERNAL)


def sample_dirichlet_columns(alpha: np.ndarray, rng: np.random.Generator) -> CompositionMatrix:
    """One draw per column of a C x N matrix of shape parameters"""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0) or not np.all(np.isfinite(alpha)):
        raise DomainError("Every alpha must be finite and > 0")
    draws = normalize_log_weights(log_gamma_variates(alpha, rng), axis=0)
    return CompositionMatrix(draws, tol=SIMPLEX_TOL_INTERNAL)
