"""
Laplace fitter for Dirichlet regression.

Three steps:
  1. find the posterior mode x0 by damped Newton iteration with an Armijo
     backtracking line search,
  2. linearize the likelihood at eta0 = A x0 into Gaussian pseudo-observations,
  3. solve the resulting conjugate Gaussian model exactly:
     Q_post = A^T L0 L0^T A + Q_x and Q_post m = A^T L0 z0.
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, special, stats

from compositional_core import CompositionMatrix
from dirichlet_likelihood import (
    PseudoObservationSet, neg_log_lik_rows, pseudo_observations,
)
from exceptions import (
    DirichletRegressionError, NonConvergenceError, NonPositiveDefiniteError, NumericRangeError,
    SchemaError, ShapeError, ValidationError,
)
from model_spec import (
    INTERCEPT, CovariateTable, DesignMatrix, FormulaSpec, build_design_matrix,
    prior_precision_diagonal, vectorize_predictor,
)

logger = logging.getLogger(__name__)

FIT_SCHEMA_VERSION = 1
QUANTILES = (0.025, 0.5, 0.975)
WAIC_VARIANCE_WARNING = 0.4
MC_BATCHES = 10


def _env(name: str, default, cast):
    value = os.getenv(name)
    if value is None or value == '':
        return default
    try:
        return cast(value)
    except ValueError as e:
        raise ValidationError(f"Environment variable {name}={value!r} is invalid: {e}") from e


@dataclass(frozen=True)
class FitConfig:
    """Settings for the mode search and the posterior sampling that follows"""

    prior_precision: float = 1e-4
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    min_step: float = 1e-10
    decrement_tolerance: float = 1e-15
    seed: int = 1000
    n_posterior_draws: int = 4000

    def __post_init__(self):
        tau = np.asarray(self.prior_precision, dtype=float)
        if np.any(tau <= 0) or not np.all(np.isfinite(tau)):
            raise ValidationError(f"prior_precision must be > 0, got {self.prior_precision}")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.gradient_tolerance <= 0:
            raise ValidationError("gradient_tolerance must be > 0")
        if not 0.0 < self.armijo_c1 < 0.5:
            raise ValidationError(f"armijo_c1 must be in (0, 0.5), got {self.armijo_c1}")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValidationError(f"backtrack_factor must be in (0, 1), got {self.backtrack_factor}")
        if self.min_step <= 0:
            raise ValidationError("min_step must be > 0")
        if self.decrement_tolerance <= 0:
            raise ValidationError("decrement_tolerance must be > 0")
        if self.n_posterior_draws < 2:
            raise ValidationError("n_posterior_draws must be >= 2")

    @classmethod
    def from_env(cls, **overrides) -> 'FitConfig':
        """Defaults from DIRREG_* environment variables, then explicit overrides"""
        values = dict(
            prior_precision=_env('DIRREG_PREC', cls.prior_precision, float),
            max_iterations=_env('DIRREG_MAX_ITER', cls.max_iterations, int),
            gradient_tolerance=_env('DIRREG_TOL', cls.gradient_tolerance, float),
            seed=_env('DIRREG_SEED', cls.seed, int),
            n_posterior_draws=_env('DIRREG_DRAWS', cls.n_posterior_draws, int),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        tau = np.asarray(self.prior_precision)
        out['prior_precision'] = tau.tolist() if tau.ndim else float(tau)
        return out


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    gradient_norm: float
    step_length: float
    fallback_count: int
    hessian: str


@dataclass(frozen=True)
class ModeResult:
    x0: np.ndarray
    trace: List[IterationRecord]
    converged: bool
    stop_reason: str


@dataclass(frozen=True)
class ModelCriteria:
    dic: float
    waic: float
    lcpo: float
    p_dic: float
    p_waic: float
    waic_warning: bool
    n_draws: int
    mc_se: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _composition_rows(Y) -> np.ndarray:
    data = Y.data if isinstance(Y, CompositionMatrix) else np.asarray(Y, dtype=float)
    return data.T


def _check_layout(Y, A: DesignMatrix) -> np.ndarray:
    y_rows = _composition_rows(Y)
    if y_rows.shape != (A.n_obs, A.n_categories):
        raise ShapeError(
            f"Response is {y_rows.shape[1]} x {y_rows.shape[0]} (C x N) but the design expects "
            f"{A.n_categories} x {A.n_obs}"
        )
    return y_rows


def objective(x: np.ndarray, Y, A: DesignMatrix, tau) -> float:
    """Exact negative log-posterior: sum of l(y_n | eta_n) + x^T Q_x x / 2"""
    x = np.asarray(x, dtype=float)
    y_rows = _check_layout(Y, A)
    q = prior_precision_diagonal(tau, A.n_coefficients)
    eta_rows = vectorize_predictor(A, x).reshape(A.n_obs, A.n_categories)
    return float(np.sum(neg_log_lik_rows(y_rows, eta_rows)) + 0.5 * np.sum(q * x ** 2))


def objective_derivatives(x: np.ndarray, Y, A: DesignMatrix, tau,
                          use_expected: bool = False) -> Tuple[np.ndarray, np.ndarray, PseudoObservationSet]:
    """Gradient A^T g + Q_x x and Hessian A^T H A + Q_x of the objective.

    H is block diagonal, exact per block unless that block is not positive
    definite. The pseudo-observation set at eta = A x is returned as well.
    """
    x = np.asarray(x, dtype=float)
    _check_layout(Y, A)
    q = prior_precision_diagonal(tau, A.n_coefficients)
    eta_tilde = vectorize_predictor(A, x)
    pseudo = pseudo_observations(Y, eta_tilde, use_expected=use_expected)

    At = A.entries.T
    grad = np.asarray(At @ pseudo.gradient_blocks.reshape(-1)) + q * x
    hess = np.asarray((At @ pseudo.block_hessian() @ A.entries).todense()) + np.diag(q)
    return grad, 0.5 * (hess + hess.T), pseudo


def pseudo_gradient(x: np.ndarray, pseudo: PseudoObservationSet, A: DesignMatrix, tau) -> np.ndarray:
    """Gradient of the linearized objective: -A^T L0 (z0 - L0^T A x) + Q_x x"""
    x = np.asarray(x, dtype=float)
    q = prior_precision_diagonal(tau, A.n_coefficients)
    L = pseudo.block_factor()
    residual = pseudo.z0 - L.T @ vectorize_predictor(A, x)
    return -np.asarray(A.entries.T @ (L @ residual)) + q * x


def conjugate_gaussian_solve(A_entries, L_factor, z0: np.ndarray, q: np.ndarray
                             ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact posterior of x given z0 ~ N(L^T A x, I) and x ~ N(0, diag(q)^{-1}).

    Returns (Q_post, mean, marginal_sd). The marginal variances come from one
    Cholesky solve per unit vector.
    """
    LtA = L_factor.T @ A_entries
    gram = LtA.T @ LtA
    gram = np.asarray(gram.todense() if hasattr(gram, 'todense') else gram)
    Q_post = gram + np.diag(q)
    Q_post = 0.5 * (Q_post + Q_post.T)
    b = np.asarray(A_entries.T @ (L_factor @ z0)).reshape(-1)

    try:
        factor = linalg.cho_factor(Q_post, lower=True)
    except linalg.LinAlgError as e:
        raise DirichletRegressionError(f"Posterior precision is not positive definite: {e}") from e
    mean = linalg.cho_solve(factor, b)
    J = mean.size
    identity = np.eye(J)
    variances = np.array([linalg.cho_solve(factor, identity[:, j])[j] for j in range(J)])
    return Q_post, mean, np.sqrt(variances)


def formula_from_labels(labels) -> FormulaSpec:
    """Rebuild a FormulaSpec from design column labels (category, term)"""
    if not labels:
        raise ValidationError("Design matrix carries no column labels")
    n_categories = max(c for c, _ in labels) + 1
    blocks: List[List[str]] = [[] for _ in range(n_categories)]
    for c, term in labels:
        blocks[c].append(term)
    return FormulaSpec(tuple(tuple(b) for b in blocks))


# ---------------------------------------------------------------------------
# Posterior fit
# ---------------------------------------------------------------------------

@dataclass
class PosteriorFit:
    """Gaussian approximation to the posterior of the coefficients"""

    formula: FormulaSpec
    mode: np.ndarray
    posterior_precision: np.ndarray
    posterior_mean: np.ndarray
    marginal_sd: np.ndarray
    config: FitConfig
    n_obs: int
    iteration_trace: List[IterationRecord] = field(default_factory=list)
    criteria: Optional[ModelCriteria] = None
    fallback_count: int = 0
    transformed: bool = False

    @property
    def n_categories(self) -> int:
        return self.formula.n_categories

    @property
    def labels(self) -> List[Tuple[int, str]]:
        return self.formula.column_labels()

    @property
    def quantiles(self) -> Dict[float, np.ndarray]:
        return {
            q: self.posterior_mean + stats.norm.ppf(q) * self.marginal_sd
            for q in QUANTILES
        }

    def precision_factor(self):
        return linalg.cho_factor(self.posterior_precision, lower=True)

    def marginal_density(self, j: int, grid: np.ndarray) -> np.ndarray:
        return stats.norm.pdf(grid, loc=self.posterior_mean[j], scale=self.marginal_sd[j])

    def sample(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """Joint draws from N(mean, Q_post^{-1}), shape (n_draws, J)"""
        L = linalg.cholesky(self.posterior_precision, lower=True)
        z = rng.standard_normal((self.posterior_mean.size, n_draws))
        return (self.posterior_mean[:, None] + linalg.solve_triangular(L, z, lower=True, trans='T')).T

    def summary_table(self) -> pd.DataFrame:
        qs = self.quantiles
        rows = []
        for j, (c, term) in enumerate(self.labels):
            rows.append({
                'category': c + 1,
                'term': term,
                'mean': self.posterior_mean[j],
                'sd': self.marginal_sd[j],
                '0.025quant': qs[0.025][j],
                '0.5quant': qs[0.5][j],
                '0.975quant': qs[0.975][j],
                # marginal mode of a Gaussian equals its mean
                'mode': self.posterior_mean[j],
            })
        return pd.DataFrame(rows)

    def format_summary(self) -> str:
        rule = '=' * 71
        lines = [f"Formula: {self.formula.render()}", f"Prior precision: {self.config.prior_precision}", '',
                 '---- FIXED EFFECTS ----', rule]
        table = self.summary_table()
        for c in range(self.n_categories):
            block = table[table['category'] == c + 1].drop(columns='category').set_index('term')
            block.index.name = None
            lines.append(f"Category  {c + 1}")
            lines.append('-' * 71)
            lines.append(block.to_string(float_format=lambda v: f"{v:.4f}"))
            lines.append(rule)
        lines.append('')
        if self.criteria is not None:
            lines.append(
                f"DIC = {self.criteria.dic:.4f} , WAIC = {self.criteria.waic:.4f} , "
                f"LCPO = {self.criteria.lcpo:.4f}"
            )
        lines.append(f"Number of observations: {self.n_obs}")
        lines.append(f"Number of Categories: {self.n_categories}")
        if self.transformed:
            lines.append("Responses with zeros or ones were compressed into the open simplex")
        return '\n'.join(lines)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': FIT_SCHEMA_VERSION,
            'formula': self.formula.render(),
            'terms': [list(block) for block in self.formula.per_category_terms],
            'config': self.config.to_dict(),
            'n_obs': self.n_obs,
            'n_categories': self.n_categories,
            'mode': self.mode.tolist(),
            'posterior_mean': self.posterior_mean.tolist(),
            'marginal_sd': self.marginal_sd.tolist(),
            'posterior_precision': self.posterior_precision.tolist(),
            'fallback_count': self.fallback_count,
            'transformed': self.transformed,
            'iteration_trace': [asdict(r) for r in self.iteration_trace],
            'criteria': self.criteria.to_dict() if self.criteria is not None else None,
            'summary': self.summary_table().to_dict(orient='records'),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'PosteriorFit':
        try:
            version = payload['schema_version']
            if version != FIT_SCHEMA_VERSION:
                raise SchemaError(f"Unsupported fit schema version {version}")
            terms = payload['terms']
            response = payload['formula'].split('~', 1)[0].strip() or 'y'
            formula = FormulaSpec(tuple(tuple(block) for block in terms), response=response)
            config_values = dict(payload['config'])
            tau = config_values['prior_precision']
            config_values['prior_precision'] = np.asarray(tau, dtype=float) if isinstance(tau, list) else tau
            criteria = payload.get('criteria')
            return cls(
                formula=formula,
                mode=np.asarray(payload['mode'], dtype=float),
                posterior_precision=np.asarray(payload['posterior_precision'], dtype=float),
                posterior_mean=np.asarray(payload['posterior_mean'], dtype=float),
                marginal_sd=np.asarray(payload['marginal_sd'], dtype=float),
                config=FitConfig(**config_values),
                n_obs=int(payload['n_obs']),
                iteration_trace=[IterationRecord(**r) for r in payload.get('iteration_trace', [])],
                criteria=ModelCriteria(**criteria) if criteria else None,
                fallback_count=int(payload.get('fallback_count', 0)),
                transformed=bool(payload.get('transformed', False)),
            )
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Fit JSON is missing or has malformed field: {e}") from e


@dataclass
class PredictiveResult:
    """Posterior predictive summaries for new covariate rows.

    Every table is long format with one row per (row, category); the
    precision table has one row per new observation.
    """

    eta: pd.DataFrame
    alpha: pd.DataFrame
    means: pd.DataFrame
    precision: pd.DataFrame
    mean_draws: np.ndarray

    def to_frames(self) -> Dict[str, pd.DataFrame]:
        return {'eta': self.eta, 'alpha': self.alpha, 'means': self.means, 'precision': self.precision}


def _sample_summary(draws: np.ndarray, axis: int = 0) -> Dict[str, np.ndarray]:
    qs = np.quantile(draws, QUANTILES, axis=axis)
    return {
        'mean': draws.mean(axis=axis),
        'sd': draws.std(axis=axis, ddof=1),
        '0.025quant': qs[0],
        '0.5quant': qs[1],
        '0.975quant': qs[2],
    }


class LaplaceFitter:
    """Runs the mode search, the Gaussian posterior solve, criteria and prediction"""

    def __init__(self, config: Optional[FitConfig] = None):
        self.config = config or FitConfig()
        self.logger = logging.getLogger(__name__)

    # -- step 1 -------------------------------------------------------------

    def _newton_direction(self, grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
        try:
            factor = linalg.cho_factor(hess, lower=True)
        except linalg.LinAlgError as e:
            raise NonPositiveDefiniteError(f"Newton system is not positive definite: {e}") from e
        return -linalg.cho_solve(factor, grad)

    def _line_search(self, x, d, f, slope, Y, A) -> Tuple[Optional[np.ndarray], float, float]:
        cfg = self.config
        step = 1.0
        while step >= cfg.min_step:
            candidate = x + step * d
            try:
                f_new = objective(candidate, Y, A, cfg.prior_precision)
            except NumericRangeError:
                f_new = np.inf
            # strict decrease; near the optimum c1*step*slope is below the resolution of f
            if f_new < f and f_new <= f + cfg.armijo_c1 * step * slope:
                return candidate, f_new, step
            self.logger.debug(f"Armijo rejected step {step:.3g} (objective {f_new:.10g} vs {f:.10g})")
            step *= cfg.backtrack_factor
        return None, f, step

    def posterior_mode(self, Y, A: DesignMatrix) -> ModeResult:
        """Damped Newton from x = 0.

        Stops when the gradient inf-norm meets gradient_tolerance or when the
        Newton decrement -g^T d / 2 drops to decrement_tolerance * max(1, |f|),
        the point past which the objective can no longer resolve progress.
        """
        cfg = self.config
        tau = cfg.prior_precision
        x = np.zeros(A.n_coefficients)
        f = objective(x, Y, A, tau)
        trace: List[IterationRecord] = []

        for iteration in range(cfg.max_iterations + 1):
            grad, hess, pseudo = objective_derivatives(x, Y, A, tau)
            kind = 'exact'
            gnorm = float(np.max(np.abs(grad)))
            if gnorm <= cfg.gradient_tolerance:
                trace.append(IterationRecord(iteration, f, gnorm, 0.0, pseudo.fallback_count, kind))
                self.logger.info(f"Mode found after {iteration} iterations (|grad|inf = {gnorm:.3e})")
                return ModeResult(x0=x, trace=trace, converged=True, stop_reason='gradient_tolerance')
            if iteration == cfg.max_iterations:
                trace.append(IterationRecord(iteration, f, gnorm, 0.0, pseudo.fallback_count, kind))
                break

            d = self._newton_direction(grad, hess)
            slope = float(grad @ d)
            if slope >= 0.0:
                self.logger.warning(f"Iteration {iteration}: not a descent direction, switching to expected Hessian")
                grad, hess, pseudo = objective_derivatives(x, Y, A, tau, use_expected=True)
                kind = 'expected'
                d = self._newton_direction(grad, hess)
                slope = float(grad @ d)
                if slope >= 0.0:
                    trace.append(IterationRecord(iteration, f, gnorm, 0.0, pseudo.fallback_count, kind))
                    raise NonConvergenceError(
                        f"No descent direction at iteration {iteration} even with the expected Hessian",
                        trace=[asdict(r) for r in trace],
                    )

            decrement = -0.5 * slope
            if decrement <= cfg.decrement_tolerance * max(1.0, abs(f)):
                trace.append(IterationRecord(iteration, f, gnorm, 0.0, pseudo.fallback_count, kind))
                self.logger.info(
                    f"Mode found after {iteration} iterations (Newton decrement {decrement:.3e}, "
                    f"|grad|inf = {gnorm:.3e})"
                )
                return ModeResult(x0=x, trace=trace, converged=True, stop_reason='newton_decrement')

            x_new, f_new, step = self._line_search(x, d, f, slope, Y, A)
            if x_new is None:
                trace.append(IterationRecord(iteration, f, gnorm, 0.0, pseudo.fallback_count, kind))
                self.logger.warning(
                    f"Line search step underflowed at iteration {iteration} (|grad|inf = {gnorm:.3e})"
                )
                return ModeResult(x0=x, trace=trace, converged=False, stop_reason='step_underflow')

            trace.append(IterationRecord(iteration, f, gnorm, step, pseudo.fallback_count, kind))
            self.logger.info(
                f"Iteration {iteration}: objective {f_new:.8f}, |grad|inf {gnorm:.3e}, "
                f"step {step:.3g}, fallback blocks {pseudo.fallback_count}"
            )
            x, f = x_new, f_new

        raise NonConvergenceError(
            f"Mode search did not converge in {cfg.max_iterations} iterations",
            trace=[asdict(r) for r in trace],
        )

    # -- steps 2 and 3 --------------------------------------------------------

    def gaussian_posterior(self, x0: np.ndarray, Y, A: DesignMatrix,
                           formula: Optional[FormulaSpec] = None,
                           trace: Optional[List[IterationRecord]] = None) -> PosteriorFit:
        """Conjugate Gaussian posterior given pseudo-observations at eta0 = A x0"""
        cfg = self.config
        q = prior_precision_diagonal(cfg.prior_precision, A.n_coefficients)
        eta0 = vectorize_predictor(A, x0)
        pseudo = pseudo_observations(Y, eta0)
        if pseudo.fallback_count:
            self.logger.info(f"Expected Hessian used for {pseudo.fallback_count} observations at the mode")

        Q_post, mean, sd = conjugate_gaussian_solve(A.entries, pseudo.block_factor(), pseudo.z0, q)
        return PosteriorFit(
            formula=formula or formula_from_labels(A.labels),
            mode=np.asarray(x0, dtype=float),
            posterior_precision=Q_post,
            posterior_mean=mean,
            marginal_sd=sd,
            config=cfg,
            n_obs=A.n_obs,
            iteration_trace=list(trace or []),
            fallback_count=pseudo.fallback_count,
        )

    # -- criteria -------------------------------------------------------------

    def _draw_loglik(self, fit: PosteriorFit, Y, A: DesignMatrix, draws: np.ndarray) -> np.ndarray:
        """log p(y_n | x_s) for every draw s and observation n, shape (S, N)"""
        y_rows = _check_layout(Y, A)
        eta = np.asarray(A.entries @ draws.T).T.reshape(draws.shape[0], A.n_obs, A.n_categories)
        return -neg_log_lik_rows(y_rows[None, :, :], eta)

    @staticmethod
    def _criteria_from_loglik(loglik: np.ndarray, loglik_at_mean: np.ndarray) -> Dict[str, float]:
        S = loglik.shape[0]
        deviance = -2.0 * loglik.sum(axis=1)
        deviance_at_mean = -2.0 * loglik_at_mean.sum()
        dic = 2.0 * deviance.mean() - deviance_at_mean
        lppd = special.logsumexp(loglik, axis=0) - np.log(S)
        var_log = loglik.var(axis=0, ddof=1)
        waic = -2.0 * (lppd.sum() - var_log.sum())
        log_cpo = -(special.logsumexp(-loglik, axis=0) - np.log(S))
        lcpo = -np.mean(log_cpo)
        return {
            'dic': float(dic),
            'p_dic': float(deviance.mean() - deviance_at_mean),
            'waic': float(waic),
            'p_waic': float(var_log.sum()),
            'lcpo': float(lcpo),
            'max_var': float(np.max(var_log)),
        }

    def model_criteria(self, fit: PosteriorFit, Y, A: DesignMatrix) -> ModelCriteria:
        """DIC, WAIC and LCPO from seeded draws of the Gaussian posterior"""
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        draws = fit.sample(cfg.n_posterior_draws, rng)
        loglik = self._draw_loglik(fit, Y, A, draws)
        loglik_at_mean = self._draw_loglik(fit, Y, A, fit.posterior_mean[None, :])[0]
        values = self._criteria_from_loglik(loglik, loglik_at_mean)

        waic_warning = not np.isfinite(values['max_var']) or values['max_var'] > WAIC_VARIANCE_WARNING
        if waic_warning:
            self.logger.warning(
                f"WAIC pointwise log-likelihood variance up to {values['max_var']:.3g}; "
                "the WAIC estimate may be unreliable"
            )

        mc_se: Dict[str, float] = {}
        S = loglik.shape[0]
        if S >= 2 * MC_BATCHES:
            batches = [self._criteria_from_loglik(chunk, loglik_at_mean)
                       for chunk in np.array_split(loglik, MC_BATCHES, axis=0)]
            for key in ('dic', 'waic', 'lcpo'):
                spread = np.std([b[key] for b in batches], ddof=1)
                mc_se[key] = float(spread / np.sqrt(MC_BATCHES))

        return ModelCriteria(
            dic=values['dic'], waic=values['waic'], lcpo=values['lcpo'],
            p_dic=values['p_dic'], p_waic=values['p_waic'],
            waic_warning=bool(waic_warning), n_draws=S, mc_se=mc_se,
        )

    # -- prediction ----------------------------------------------------------

    def predict(self, fit: PosteriorFit, new_covariates: CovariateTable) -> PredictiveResult:
        """Posterior predictive distributions of eta, alpha, composition means and precision"""
        A_new = build_design_matrix(fit.formula, new_covariates)
        M, C = new_covariates.n_obs, fit.n_categories
        factor = fit.precision_factor()

        dense = A_new.entries.toarray()
        eta_mean = dense @ fit.posterior_mean
        eta_var = np.einsum('ij,ji->i', dense, linalg.cho_solve(factor, dense.T))
        eta_sd = np.sqrt(np.maximum(eta_var, 0.0))

        rows = np.repeat(np.arange(M), C)
        cats = np.tile(np.arange(1, C + 1), M)
        z = {q: stats.norm.ppf(q) for q in QUANTILES}

        eta_frame = pd.DataFrame({
            'row': rows, 'category': cats, 'mean': eta_mean, 'sd': eta_sd,
            **{f"{q}quant": eta_mean + z[q] * eta_sd for q in QUANTILES},
            'mode': eta_mean,
        })
        alpha_frame = pd.DataFrame({
            'row': rows, 'category': cats,
            'mean': np.exp(eta_mean + 0.5 * eta_var),
            'sd': np.sqrt(np.expm1(eta_var) * np.exp(2.0 * eta_mean + eta_var)),
            **{f"{q}quant": np.exp(eta_mean + z[q] * eta_sd) for q in QUANTILES},
            'mode': np.exp(eta_mean - eta_var),
        })

        rng = np.random.default_rng([self.config.seed, 1])
        draws = fit.sample(self.config.n_posterior_draws, rng)
        eta_draws = (dense @ draws.T).T.reshape(-1, M, C)
        # log-sum-exp normalization keeps draws on the simplex
        alpha0_log = special.logsumexp(eta_draws, axis=2)
        mean_draws = np.exp(eta_draws - alpha0_log[..., None])
        alpha0_draws = np.exp(alpha0_log)

        mean_summary = _sample_summary(mean_draws.reshape(mean_draws.shape[0], -1))
        means_frame = pd.DataFrame({'row': rows, 'category': cats, **mean_summary})
        precision_summary = _sample_summary(alpha0_draws)
        precision_frame = pd.DataFrame({'row': np.arange(M), **precision_summary})

        return PredictiveResult(
            eta=eta_frame, alpha=alpha_frame, means=means_frame,
            precision=precision_frame, mean_draws=mean_draws,
        )

    def fitted(self, fit: PosteriorFit, covariates: CovariateTable) -> PredictiveResult:
        """Posterior summaries of alpha, means and precision for the training rows"""
        return self.predict(fit, covariates)

    # -- all steps -------------------------------------------------------------

    def fit(self, formula: FormulaSpec, Y: CompositionMatrix, covariates: CovariateTable,
            with_criteria: bool = True) -> PosteriorFit:
        if Y.n_categories != formula.n_categories:
            raise ShapeError(
                f"Response has {Y.n_categories} categories, formula has {formula.n_categories}"
            )
        if Y.n_obs != covariates.n_obs:
            raise ShapeError(f"Response has {Y.n_obs} observations, covariates have {covariates.n_obs}")
        A = build_design_matrix(formula, covariates)
        mode = self.posterior_mode(Y, A)
        fit = self.gaussian_posterior(mode.x0, Y, A, formula, trace=mode.trace)
        if with_criteria:
            fit.criteria = self.model_criteria(fit, Y, A)
        return fit


# Function forms of the fitter steps

def posterior_mode(Y, A: DesignMatrix, config: Optional[FitConfig] = None) -> ModeResult:
    return LaplaceFitter(config).posterior_mode(Y, A)


def gaussian_posterior(x0: np.ndarray, Y, A: DesignMatrix, tau,
                       formula: Optional[FormulaSpec] = None) -> PosteriorFit:
    return LaplaceFitter(FitConfig(prior_precision=tau)).gaussian_posterior(x0, Y, A, formula)


def model_criteria(fit: PosteriorFit, Y, A: DesignMatrix, config: Optional[FitConfig] = None) -> ModelCriteria:
    return LaplaceFitter(config or fit.config).model_criteria(fit, Y, A)


def predict(fit: PosteriorFit, new_covariates: CovariateTable) -> PredictiveResult:
    return LaplaceFitter(fit.config).predict(fit, new_covariates)


def intercept_only_formula(n_categories: int, response: str = 'y') -> FormulaSpec:
    return FormulaSpec(tuple((INTERCEPT,) for _ in range(n_categories)), response=response)
