#!/usr/bin/env python3
"""
Command line front end: simulate, fit, predict, compare against the MCMC
oracle, fit the glacial-tills model, and re-run any command from its manifest.
"""

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from datasets import (
    GLACIAL_FORMULA, SIMULATION_DESIGNS, Dataset, load_covariates, load_dataset, load_glacial_tills,
    simulate_dataset,
)
from database import Database
from exceptions import (
    DataIOError, DirichletRegressionError, NonConvergenceError, SchemaError, ValidationError,
    exit_code_for,
)
from laplace_fitter import FitConfig, LaplaceFitter, PosteriorFit, PredictiveResult
from mcmc_oracle import ChainConfig, ChainOutput, agreement_metrics, run_chains
from model_spec import build_design_matrix, parse_formula

__version__ = '0.1.0'

logger = logging.getLogger(__name__)

PLOT_GRID_POINTS = 200
PLOT_HISTOGRAM_BINS = 60


def setup_logging(level: str = 'INFO', log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class StageTimer:
    """Wall-clock seconds per named stage"""

    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        began = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - began
            logger.info(f"Stage '{name}' took {self.timings[name]:.3f}s")


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    try:
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n')
    except OSError as e:
        raise DataIOError(f"Could not write {path}: {e}") from e


def write_csv(path: Path, frame: pd.DataFrame) -> None:
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise DataIOError(f"Could not write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def load_fit(path) -> PosteriorFit:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataIOError(f"Fit file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"Fit file {path} is not valid JSON: {e}") from e
    return PosteriorFit.from_dict(payload)


def fit_config_from_args(args) -> FitConfig:
    return FitConfig.from_env(
        prior_precision=args.prec,
        max_iterations=args.max_iter,
        gradient_tolerance=args.tol,
        seed=args.seed,
        n_posterior_draws=args.draws,
    )


# flag -> FitConfig field for flags whose default comes from DIRREG_*
ENV_BACKED_FLAGS = {
    'prec': 'prior_precision',
    'max_iter': 'max_iterations',
    'tol': 'gradient_tolerance',
    'seed': 'seed',
    'draws': 'n_posterior_draws',
}


def resolve_env_defaults(args) -> None:
    """Replace unset env-backed flags with their effective values, in place"""
    defaults = FitConfig.from_env()
    for flag, attr in ENV_BACKED_FLAGS.items():
        if hasattr(args, flag) and getattr(args, flag) is None:
            setattr(args, flag, getattr(defaults, attr))


def chain_config_from_args(args, n_iterations: Optional[int] = None, n_warmup: Optional[int] = None) -> ChainConfig:
    return ChainConfig(
        n_iterations=n_iterations or args.iters,
        n_warmup=args.warmup if n_warmup is None else n_warmup,
        thin=args.thin,
        n_chains=args.chains,
        seed=args.chain_seed,
    )


def _prefixed(frames: Dict[str, pd.DataFrame], prefix: str, out: Path) -> None:
    for name, frame in frames.items():
        write_csv(out / f"{prefix}_{name}.csv", frame)


def _dump_trace(out: Path, error: NonConvergenceError) -> None:
    if error.trace:
        write_csv(out / 'trace.csv', pd.DataFrame(error.trace))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, out: Path, timer: StageTimer) -> Dict[str, Any]:
    """Simulate covariates and Dirichlet responses from fixed coefficients"""
    if args.design:
        design = SIMULATION_DESIGNS.get(args.design)
        if design is None:
            raise ValidationError(f"Unknown design '{args.design}'; choose from {sorted(SIMULATION_DESIGNS)}")
        formula_text = design.formula
        coefficients = design.coefficients()
        spec = parse_formula(formula_text, design.n_categories)
    else:
        if not args.formula or not args.coefficients:
            raise ValidationError("simulate needs --design, or --formula with --coefficients")
        formula_text = args.formula
        n_categories = args.formula.count('|') + 1
        spec = parse_formula(formula_text, n_categories)
        try:
            coefficients = np.array([float(v) for v in args.coefficients.split(',')])
        except ValueError as e:
            raise ValidationError(f"Coefficients must be comma-separated numbers: {e}") from e

    seed = args.seed if args.seed is not None else FitConfig.from_env().seed
    with timer.stage('simulate'):
        dataset = simulate_dataset(spec, coefficients, args.n, seed, law=args.law)

    frame = dataset.to_frame()
    ycols = [f"y{c + 1}" for c in range(spec.n_categories)]
    write_csv(out / 'data.csv', frame)
    write_csv(out / 'responses.csv', frame[ycols])
    write_csv(out / 'covariates.csv', frame.drop(columns=ycols))
    print(f"Simulated {args.n} observations of {spec.n_categories} categories from {spec.render()}")
    return {'formula': spec.render(), 'coefficients': coefficients.tolist()}


def _fit_dataset(dataset: Dataset, spec, config: FitConfig, out: Path, timer: StageTimer,
                 verbose: bool = False) -> PosteriorFit:
    fitter = LaplaceFitter(config)
    A = build_design_matrix(spec, dataset.covariates)
    try:
        with timer.stage('posterior_mode'):
            mode = fitter.posterior_mode(dataset.Y, A)
    except NonConvergenceError as e:
        _dump_trace(out, e)
        raise
    with timer.stage('gaussian_posterior'):
        fit = fitter.gaussian_posterior(mode.x0, dataset.Y, A, spec, trace=mode.trace)
    with timer.stage('model_criteria'):
        fit.criteria = fitter.model_criteria(fit, dataset.Y, A)
    fit.transformed = dataset.transformed

    with timer.stage('fitted_values'):
        fitted = fitter.fitted(fit, dataset.covariates)
    write_json(out / 'fit.json', fit.to_dict())
    summary = fit.format_summary()
    (out / 'summary.txt').write_text(summary + '\n')
    trace = pd.DataFrame([asdict(r) for r in fit.iteration_trace])
    write_csv(out / 'trace.csv', trace)
    _prefixed({k: v for k, v in fitted.to_frames().items() if k != 'eta'}, 'fitted', out)
    if verbose:
        print('---- MODE SEARCH ----')
        print(trace.to_string(index=False))
        print('')
    print(summary)
    return fit


def cmd_fit(args, out: Path, timer: StageTimer) -> Dict[str, Any]:
    """Fit a formula to a CSV dataset"""
    if not args.formula or not args.data:
        raise ValidationError("fit needs --formula and --data")
    with timer.stage('load'):
        dataset, spec = load_dataset(args.data, args.formula)
    if dataset.transformed:
        print("Note: responses with zeros or ones were compressed into the open simplex")
    config = fit_config_from_args(args)
    _fit_dataset(dataset, spec, config, out, timer, verbose=getattr(args, 'verbose', False))
    return {'formula': spec.render(), 'fit_config': config.to_dict(), 'transformed': dataset.transformed}


def cmd_glacial(args, out: Path, timer: StageTimer) -> Dict[str, Any]:
    """Abundance model for the glacial-tills pebble compositions"""
    if not args.data:
        raise ValidationError("glacial needs --data")
    with timer.stage('load'):
        dataset = load_glacial_tills(args.data)
    spec = parse_formula(GLACIAL_FORMULA, 4)
    config = fit_config_from_args(args)
    _fit_dataset(dataset, spec, config, out, timer, verbose=getattr(args, 'verbose', False))
    return {'formula': spec.render(), 'fit_config': config.to_dict(), 'transformed': dataset.transformed}


def cmd_predict(args, out: Path, timer: StageTimer) -> Dict[str, Any]:
    """Posterior predictive summaries for new covariate rows"""
    if not args.fit or not args.data:
        raise ValidationError("predict needs --fit and --data")
    fit = load_fit(args.fit)
    covariates = load_covariates(args.data, fit.formula.covariate_names())
    with timer.stage('predict'):
        result = LaplaceFitter(fit.config).predict(fit, covariates)
    _prefixed(result.to_frames(), 'predict', out)
    print(format_prediction(result))
    return {'formula': fit.formula.render(), 'fit_path': str(args.fit)}


def format_prediction(result: PredictiveResult) -> str:
    lines = ['---- PREDICTIVE ALPHAS ----']
    lines.append(result.alpha.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    lines.append('')
    lines.append('---- PREDICTIVE MEANS ----')
    lines.append(result.means.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    lines.append('')
    lines.append('---- PREDICTIVE PRECISION ----')
    lines.append(result.precision.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return '\n'.join(lines)


def plot_data(fit: PosteriorFit, chains: Dict[str, ChainOutput]) -> pd.DataFrame:
    """Density curves per coefficient and method in long format"""
    frames = []
    for j, (c, term) in enumerate(fit.labels):
        label = f"{term}[{c + 1}]"
        mean, sd = fit.posterior_mean[j], fit.marginal_sd[j]
        grid = np.linspace(mean - 4 * sd, mean + 4 * sd, PLOT_GRID_POINTS)
        frames.append(pd.DataFrame({
            'coefficient': label, 'method': 'laplace', 'x': grid,
            'density': fit.marginal_density(j, grid),
        }))
        for method, output in chains.items():
            density, edges = np.histogram(output.draws[:, j], bins=PLOT_HISTOGRAM_BINS, density=True)
            frames.append(pd.DataFrame({
                'coefficient': label, 'method': method,
                'x': 0.5 * (edges[:-1] + edges[1:]), 'density': density,
            }))
    return pd.concat(frames, ignore_index=True)


def cmd_compare(args, out: Path, timer: StageTimer) -> Dict[str, Any]:
    """Laplace fit against short and long oracle chains"""
    if not args.formula or not args.data:
        raise ValidationError("compare needs --formula and --data")
    dataset, spec = load_dataset(args.data, args.formula)
    config = fit_config_from_args(args)
    A = build_design_matrix(spec, dataset.covariates)

    fitter = LaplaceFitter(config)
    with timer.stage('laplace'):
        try:
            mode = fitter.posterior_mode(dataset.Y, A)
        except NonConvergenceError as e:
            _dump_trace(out, e)
            raise
        fit = fitter.gaussian_posterior(mode.x0, dataset.Y, A, spec, trace=mode.trace)

    chains: Dict[str, ChainOutput] = {}
    long_config = chain_config_from_args(args)
    if args.short_iters:
        short_config = chain_config_from_args(args, args.short_iters, args.short_iters // 10)
        with timer.stage('mcmc_short'):
            chains['mcmc_short'] = run_chains(dataset.Y, A, config.prior_precision, short_config, start=fit.mode)
    with timer.stage('mcmc_long'):
        chains['mcmc_long'] = run_chains(dataset.Y, A, config.prior_precision, long_config, start=fit.mode)

    report = {}
    for method, output in chains.items():
        metrics = agreement_metrics(fit, output)
        write_csv(out / f"agreement_{method}.csv", metrics)
        report[method] = {
            'metrics': metrics.to_dict(orient='records'),
            'acceptance_rate': output.acceptance_rate.tolist(),
            'rhat': output.rhat.tolist(),
            'n_kept': output.n_kept,
        }
        output.to_csv(out / f"draws_{method}.csv")
        print(f"\n---- AGREEMENT WITH {method.upper()} ----")
        print(metrics.to_string(index=False, float_format=lambda v: f"{v:.4f}"))

    write_json(out / 'fit.json', fit.to_dict())
    write_json(out / 'agreement.json', {'formula': spec.render(), 'methods': report})
    write_csv(out / 'plot_data.csv', plot_data(fit, chains))

    stages = ['laplace'] + [m for m in ('mcmc_short', 'mcmc_long') if m in chains]
    timing = pd.DataFrame({'method': stages, 'seconds': [timer.timings[s] for s in stages]})
    write_csv(out / 'timing.csv', timing)
    print('\n---- COMPUTATIONAL TIME (seconds) ----')
    print(timing.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return {
        'formula': spec.render(),
        'fit_config': config.to_dict(),
        'chain_config': long_config.to_dict(),
    }


COMMANDS = {
    'simulate': cmd_simulate,
    'fit': cmd_fit,
    'predict': cmd_predict,
    'compare': cmd_compare,
    'glacial': cmd_glacial,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_fit_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--formula', help="Formula, e.g. 'y ~ 1 + v1 | 1 + v2'")
    parser.add_argument('--data', help='CSV with y1..yC and covariate columns')
    parser.add_argument('--prec', type=float, default=None,
                        help='Prior precision tau of every coefficient (default: DIRREG_PREC or 0.0001)')
    parser.add_argument('--max-iter', type=int, default=None, help='Mode search iteration limit (default: 100)')
    parser.add_argument('--tol', type=float, default=None, help='Gradient inf-norm tolerance (default: 1e-8)')
    parser.add_argument('--draws', type=int, default=None, help='Posterior draws for criteria/prediction (default: 4000)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Bayesian Dirichlet regression by Laplace linearization')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable debug logging')
    parser.add_argument('--db', default=None, help='SQLite run log (default: DATABASE_PATH or runs.db)')
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', default='out', help='Output directory (default: out)')
    common.add_argument('--seed', type=int, default=None, help='Random seed (default: DIRREG_SEED or 1000)')

    p = sub.add_parser('simulate', parents=[common], help='Simulate a dataset')
    p.add_argument('--design', choices=sorted(SIMULATION_DESIGNS), help='Named simulation design')
    p.add_argument('--formula', help='Formula when no design is given')
    p.add_argument('--coefficients', help='Comma-separated coefficients in category-major order')
    p.add_argument('--n', type=int, default=50, help='Number of observations (default: 50)')
    p.add_argument('--law', default='uniform', choices=['uniform', 'normal'], help='Covariate distribution')

    p = sub.add_parser('fit', parents=[common], help='Fit a model')
    _add_fit_flags(p)

    p = sub.add_parser('glacial', parents=[common], help='Fit the glacial-tills abundance model')
    _add_fit_flags(p)

    p = sub.add_parser('predict', parents=[common], help='Predict for new covariates')
    p.add_argument('--fit', help='fit.json written by the fit command')
    p.add_argument('--data', help='CSV with the covariates the formula references')

    p = sub.add_parser('compare', parents=[common], help='Compare the Laplace fit with MCMC')
    _add_fit_flags(p)
    p.add_argument('--chains', type=int, default=3, help='Number of chains (default: 3)')
    p.add_argument('--iters', type=int, default=200000, help='Iterations per chain (default: 200000)')
    p.add_argument('--warmup', type=int, default=20000, help='Warmup iterations (default: 20000)')
    p.add_argument('--thin', type=int, default=5, help='Thinning interval (default: 5)')
    p.add_argument('--short-iters', type=int, default=0, help='Also run a short chain of this length')
    p.add_argument('--chain-seed', type=int, default=2024, help='Oracle seed (default: 2024)')

    p = sub.add_parser('rerun', help='Re-run a command from its manifest.json')
    p.add_argument('manifest', help='Path to manifest.json')
    p.add_argument('--out', default=None, help='Output directory (default: the recorded one)')

    sub.add_parser('runs', help='Show the run log')
    return parser


def _manifest_args(path: str, out: Optional[str]) -> argparse.Namespace:
    try:
        manifest = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataIOError(f"Manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"Manifest {path} is not valid JSON: {e}") from e
    try:
        arguments = dict(manifest['arguments'])
    except (KeyError, TypeError) as e:
        raise SchemaError(f"Manifest {path} has no 'arguments' section") from e
    if out:
        arguments['out'] = out
    return argparse.Namespace(**arguments)


def _show_runs(db: Database) -> None:
    stats = db.get_stats()
    print(f"Total runs: {stats['total_runs']}")
    for command, count in stats['command_stats'].items():
        print(f"  {command}: {count}")
    for run in db.get_runs():
        print(f"#{run['id']} {run['created_at']} {run['command']} {run['status']} {run['formula'] or ''}")


def run_command(args: argparse.Namespace, db: Optional[Database]) -> int:
    out = Path(args.out)
    timer = StageTimer()
    manifest: Dict[str, Any] = {
        'command': args.command,
        'arguments': {},
        'version': __version__,
    }
    status, code, message = 'success', 0, None
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create output directory {out}: {e}")
        return exit_code_for(DataIOError(str(e)))

    try:
        resolve_env_defaults(args)
        manifest.update(COMMANDS[args.command](args, out, timer))
    except DirichletRegressionError as e:
        status, code, message = 'error', exit_code_for(e), str(e)
        logger.error(f"{type(e).__name__}: {e}")
    except OSError as e:
        status, code, message = 'error', exit_code_for(e), str(e)
        logger.error(f"I/O error: {e}")
    except Exception as e:
        status, code, message = 'error', exit_code_for(e), f"{type(e).__name__}: {e}"
        logger.exception(f"Unexpected error in '{args.command}': {e}")

    # effective values, so a rerun does not depend on the environment
    manifest['arguments'] = {k: v for k, v in vars(args).items() if k != 'db'}
    manifest['timings'] = timer.timings
    manifest['status'] = status
    try:
        write_json(out / 'manifest.json', manifest)
    except DataIOError as e:
        logger.error(str(e))
        code = code or exit_code_for(e)
    if db is not None:
        db.log_run(manifest, status=status, exit_code=code, error_message=message)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging('DEBUG' if args.verbose else os.getenv('LOG_LEVEL', 'INFO'), os.getenv('LOG_FILE'))

    db_path = args.db or os.getenv('DATABASE_PATH', 'runs.db')
    db = Database(db_path)

    if args.command == 'runs':
        _show_runs(db)
        return 0
    if args.command == 'rerun':
        try:
            args = _manifest_args(args.manifest, args.out)
        except DirichletRegressionError as e:
            logger.error(str(e))
            return exit_code_for(e)
        logger.info(f"Re-running '{args.command}' from manifest")
    return run_command(args, db)


if __name__ == '__main__':
    sys.exit(main())
