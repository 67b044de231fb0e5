"""
Random-walk Metropolis sampler targeting the exact Dirichlet regression
posterior. Used as the long-run reference against which the Laplace fit is
checked.

Proposals are x' = x + exp(s) * S z with z standard normal. During the first
half of warmup S is diagonal (the configured proposal scales); at the middle of
warmup S becomes the Cholesky factor of the empirical covariance of the
preceding warmup draws. The log scale s follows a Robbins-Monro recursion
toward the target acceptance rate and everything is frozen after warmup.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg, stats

from exceptions import NumericRangeError, ShapeError, ValidationError
from laplace_fitter import PosteriorFit, objective
from model_spec import DesignMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChainConfig:
    n_iterations: int = 20000
    n_warmup: int = 5000
    thin: int = 1
    n_chains: int = 3
    proposal_scale: Union[float, Sequence[float]] = 0.1
    seed: int = 2024
    target_acceptance: float = 0.25
    init_spread: float = 0.1
    adapt_covariance: bool = True

    def __post_init__(self):
        if self.n_iterations < 1 or self.n_chains < 1:
            raise ValidationError("n_iterations and n_chains must be >= 1")
        if not 0 <= self.n_warmup < self.n_iterations:
            raise ValidationError(
                f"n_warmup must be in [0, n_iterations), got {self.n_warmup} vs {self.n_iterations}"
            )
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if np.any(np.asarray(self.proposal_scale, dtype=float) <= 0):
            raise ValidationError("proposal_scale must be > 0")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValidationError("target_acceptance must be in (0, 1)")
        if self.init_spread < 0:
            raise ValidationError("init_spread must be >= 0")

    @property
    def kept_per_chain(self) -> int:
        return (self.n_iterations - self.n_warmup) // self.thin

    def to_dict(self):
        scale = np.asarray(self.proposal_scale, dtype=float)
        return {
            'n_iterations': self.n_iterations, 'n_warmup': self.n_warmup, 'thin': self.thin,
            'n_chains': self.n_chains,
            'proposal_scale': scale.tolist() if scale.ndim else float(scale),
            'seed': self.seed, 'target_acceptance': self.target_acceptance,
            'init_spread': self.init_spread, 'adapt_covariance': self.adapt_covariance,
        }


@dataclass
class ChainOutput:
    draws: np.ndarray
    chain_draws: np.ndarray
    acceptance_rate: np.ndarray
    rhat: np.ndarray
    wall_clock: float = 0.0
    labels: List[str] = field(default_factory=list)

    @property
    def n_kept(self) -> int:
        return self.draws.shape[0]

    def summary_table(self) -> pd.DataFrame:
        qs = np.quantile(self.draws, [0.025, 0.5, 0.975], axis=0)
        labels = self.labels or [f"x{j}" for j in range(self.draws.shape[1])]
        return pd.DataFrame({
            'coefficient': labels,
            'mean': self.draws.mean(axis=0),
            'sd': self.draws.std(axis=0, ddof=1),
            '0.025quant': qs[0],
            '0.5quant': qs[1],
            '0.975quant': qs[2],
            'rhat': self.rhat,
        })

    def to_csv(self, path) -> None:
        """Kept draws, one row per draw, with the chain index"""
        n_chains, kept, J = self.chain_draws.shape
        labels = self.labels or [f"x{j}" for j in range(J)]
        frame = pd.DataFrame(self.chain_draws.reshape(-1, J), columns=labels)
        frame.insert(0, 'chain', np.repeat(np.arange(n_chains), kept))
        frame.to_csv(path, index=False)


def split_rhat(chain_draws: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction, per coefficient"""
    n_chains, n, J = chain_draws.shape
    half = n // 2
    if half < 2:
        return np.full(J, np.nan)
    halves = np.concatenate([chain_draws[:, :half], chain_draws[:, half:2 * half]], axis=0)
    means = halves.mean(axis=1)
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * within + between / half
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.sqrt(var_plus / within)


def exact_log_posterior(x: np.ndarray, Y, A: DesignMatrix, tau) -> float:
    """log posterior up to a constant; -inf outside the predictor guard"""
    try:
        return -objective(x, Y, A, tau)
    except NumericRangeError:
        return -np.inf


class MetropolisOracle:
    """Adaptive random-walk Metropolis over a generic log target"""

    def __init__(self, log_target: Callable[[np.ndarray], float], dim: int,
                 config: Optional[ChainConfig] = None):
        self.log_target = log_target
        self.dim = dim
        self.config = config or ChainConfig()
        self.logger = logging.getLogger(__name__)

        scale = np.broadcast_to(np.asarray(self.config.proposal_scale, dtype=float), (dim,))
        self.initial_scale = np.array(scale)

    def _run_chain(self, start: np.ndarray, rng: np.random.Generator, chain: int):
        cfg = self.config
        d = self.dim
        kept = np.empty((cfg.kept_per_chain, d))
        shape = np.diag(self.initial_scale)
        log_s = 0.0
        adapt_start = cfg.n_warmup // 4
        adapt_switch = cfg.n_warmup // 2
        warmup_draws = []

        x = start.copy()
        logp = self.log_target(x)
        if not np.isfinite(logp):
            raise NumericRangeError(f"Chain {chain} starts at a point with zero posterior density")

        accepted = 0
        k = 0
        t = 0
        for i in range(cfg.n_iterations):
            proposal = x + np.exp(log_s) * (shape @ rng.standard_normal(d))
            logp_new = self.log_target(proposal)
            log_ratio = logp_new - logp
            accept_prob = 1.0 if log_ratio >= 0 else float(np.exp(log_ratio))
            if rng.random() < accept_prob:
                x, logp = proposal, logp_new
                if i >= cfg.n_warmup:
                    accepted += 1

            if i < cfg.n_warmup:
                t += 1
                gain = t ** -0.6
                log_s += gain * (accept_prob - cfg.target_acceptance)
                if cfg.adapt_covariance and adapt_start <= i < adapt_switch:
                    warmup_draws.append(x.copy())
                if cfg.adapt_covariance and i == adapt_switch - 1 and len(warmup_draws) > 2 * d:
                    cov = np.atleast_2d(np.cov(np.array(warmup_draws), rowvar=False))
                    cov += 1e-10 * np.mean(np.diag(cov)) * np.eye(d)
                    try:
                        shape = linalg.cholesky(cov, lower=True)
                        log_s = np.log(2.38 / np.sqrt(d))
                        t = 0
                    except linalg.LinAlgError:
                        self.logger.warning(f"Chain {chain}: warmup covariance not PD, keeping diagonal proposal")
            elif (i - cfg.n_warmup + 1) % cfg.thin == 0:
                kept[k] = x
                k += 1

        n_post = cfg.n_iterations - cfg.n_warmup
        rate = accepted / n_post
        self.logger.info(f"Chain {chain}: acceptance rate {rate:.3f}, proposal log-scale {log_s:.3f}")
        return kept, rate

    def run(self, start: Optional[np.ndarray] = None, labels: Optional[List[str]] = None) -> ChainOutput:
        cfg = self.config
        start = np.zeros(self.dim) if start is None else np.asarray(start, dtype=float)
        if start.shape != (self.dim,):
            raise ShapeError(f"Start point has shape {start.shape}, expected ({self.dim},)")

        began = time.perf_counter()
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
        chains, rates = [], []
        for chain, seed in enumerate(seeds):
            rng = np.random.default_rng(seed)
            chain_start = start + cfg.init_spread * rng.standard_normal(self.dim)
            if not np.isfinite(self.log_target(chain_start)):
                chain_start = start
            kept, rate = self._run_chain(chain_start, rng, chain)
            chains.append(kept)
            rates.append(rate)
        chain_draws = np.stack(chains)
        elapsed = time.perf_counter() - began

        output = ChainOutput(
            draws=chain_draws.reshape(-1, self.dim),
            chain_draws=chain_draws,
            acceptance_rate=np.array(rates),
            rhat=split_rhat(chain_draws),
            wall_clock=elapsed,
            labels=list(labels or []),
        )
        self.logger.info(
            f"Sampled {cfg.n_chains} chains x {cfg.n_iterations} iterations in {elapsed:.2f}s, "
            f"kept {output.n_kept} draws, max R-hat {np.nanmax(output.rhat):.4f}"
        )
        return output


def run_chains(Y, A: DesignMatrix, tau, config: Optional[ChainConfig] = None,
               start: Optional[np.ndarray] = None) -> ChainOutput:
    """Sample the exact posterior of the Dirichlet regression coefficients"""
    labels = [f"{term}[{c + 1}]" for c, term in A.labels] if A.labels else None
    oracle = MetropolisOracle(
        lambda x: exact_log_posterior(x, Y, A, tau), A.n_coefficients, config,
    )
    return oracle.run(start=start, labels=labels)


def agreement_metrics(laplace: PosteriorFit, mcmc: ChainOutput) -> pd.DataFrame:
    """Per-coefficient agreement between the Gaussian marginals and the chain draws"""
    J = laplace.posterior_mean.size
    if mcmc.draws.ndim != 2 or mcmc.draws.shape[1] != J:
        raise ShapeError(f"Laplace fit has {J} coefficients but the draws have shape {mcmc.draws.shape}")

    mc_mean = mcmc.draws.mean(axis=0)
    mc_sd = mcmc.draws.std(axis=0, ddof=1)
    ks = np.array([
        stats.kstest(mcmc.draws[:, j], 'norm', args=(laplace.posterior_mean[j], laplace.marginal_sd[j])).statistic
        for j in range(J)
    ])
    labels = [f"{term}[{c + 1}]" for c, term in laplace.labels]
    return pd.DataFrame({
        'coefficient': labels,
        'laplace_mean': laplace.posterior_mean,
        'mcmc_mean': mc_mean,
        'laplace_sd': laplace.marginal_sd,
        'mcmc_sd': mc_sd,
        'mean_delta_in_sd_units': np.abs(laplace.posterior_mean - mc_mean) / mc_sd,
        'sd_ratio': laplace.marginal_sd / mc_sd,
        'ks_statistic': ks,
    })
