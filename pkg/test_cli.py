#!/usr/bin/env python3
"""
End-to-end tests of the command line: simulate, fit, predict, compare, rerun
"""

import json

import numpy as np
import pandas as pd
import pytest

import cli
from cli import main
from database import Database
from exceptions import EXIT_IO, EXIT_NON_CONVERGENCE, EXIT_OK, EXIT_VALIDATION

SIM2_FORMULA = 'y ~ 1 + v1 | 1 + v2 | 1 + v3 | 1 + v4'


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ('DIRREG_PREC', 'DIRREG_MAX_ITER', 'DIRREG_TOL', 'DIRREG_SEED', 'DIRREG_DRAWS'):
        monkeypatch.delenv(name, raising=False)
    return tmp_path


def run(workspace, *argv):
    return main(['--db', str(workspace / 'runs.db'), *argv])


@pytest.fixture
def sim2_data(workspace):
    assert run(workspace, 'simulate', '--design', 'sim2', '--n', '60', '--seed', '1000',
               '--out', str(workspace / 'sim')) == EXIT_OK
    return workspace / 'sim' / 'data.csv'


def test_simulate_writes_tables(workspace, sim2_data):
    frame = pd.read_csv(sim2_data)
    assert list(frame.columns) == ['y1', 'y2', 'y3', 'y4', 'v1', 'v2', 'v3', 'v4']
    assert len(frame) == 60
    assert (workspace / 'sim' / 'responses.csv').exists()
    manifest = json.loads((workspace / 'sim' / 'manifest.json').read_text())
    assert manifest['command'] == 'simulate'
    assert manifest['coefficients'] == [-1.5, 2.0, 1.0, -3.0, -3.0, -1.0, 1.5, 5.0]


def test_fit_outputs_and_run_log(workspace, sim2_data, capsys):
    out = workspace / 'fit'
    code = run(workspace, 'fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data),
               '--draws', '500', '--out', str(out))
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert 'FIXED EFFECTS' in printed and 'WAIC' in printed

    fit = json.loads((out / 'fit.json').read_text())
    assert len(fit['posterior_mean']) == 8
    for name in ('summary.txt', 'trace.csv', 'fitted_alpha.csv', 'fitted_means.csv',
                 'fitted_precision.csv', 'manifest.json'):
        assert (out / name).exists(), name

    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'success'
    assert 'posterior_mode' in manifest['timings']

    runs = Database(str(workspace / 'runs.db')).get_runs(command='fit')
    assert runs[0]['status'] == 'success'


def test_fit_is_bit_identical_across_runs_and_reruns(workspace, sim2_data):
    args = ['fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data), '--draws', '300']
    assert run(workspace, *args, '--out', str(workspace / 'a')) == EXIT_OK
    assert run(workspace, *args, '--out', str(workspace / 'b')) == EXIT_OK
    assert run(workspace, 'rerun', str(workspace / 'a' / 'manifest.json'),
               '--out', str(workspace / 'c')) == EXIT_OK
    first = (workspace / 'a' / 'fit.json').read_bytes()
    assert first == (workspace / 'b' / 'fit.json').read_bytes()
    assert first == (workspace / 'c' / 'fit.json').read_bytes()


def test_predict_from_saved_fit(workspace, sim2_data):
    out = workspace / 'fit'
    assert run(workspace, 'fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data),
               '--draws', '300', '--out', str(out)) == EXIT_OK
    new = workspace / 'new.csv'
    pd.DataFrame({'v1': [0.5], 'v2': [0.5], 'v3': [0.5], 'v4': [0.5]}).to_csv(new, index=False)

    code = run(workspace, 'predict', '--fit', str(out / 'fit.json'), '--data', str(new),
               '--out', str(workspace / 'pred'))
    assert code == EXIT_OK
    means = pd.read_csv(workspace / 'pred' / 'predict_means.csv')
    assert len(means) == 4
    assert means['mean'].sum() == pytest.approx(1.0)


def test_validation_errors_exit_2(workspace, sim2_data):
    assert run(workspace, 'fit', '--formula', 'y ~ 1 | 1', '--data', str(sim2_data),
               '--out', str(workspace / 'bad')) == EXIT_VALIDATION
    assert run(workspace, 'fit', '--formula', 'y ~ 1 + nope | 1 | 1 | 1', '--data', str(sim2_data),
               '--out', str(workspace / 'bad')) == EXIT_VALIDATION
    assert run(workspace, 'fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data),
               '--prec', '-1', '--out', str(workspace / 'bad')) == EXIT_VALIDATION
    manifest = json.loads((workspace / 'bad' / 'manifest.json').read_text())
    assert manifest['status'] == 'error'


def test_missing_file_exits_4(workspace):
    code = run(workspace, 'fit', '--formula', 'y ~ 1 | 1', '--data', str(workspace / 'nope.csv'),
               '--out', str(workspace / 'out'))
    assert code == EXIT_IO


def test_non_convergence_exits_3_with_trace(workspace, sim2_data):
    out = workspace / 'stuck'
    code = run(workspace, 'fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data),
               '--max-iter', '1', '--out', str(out))
    assert code == EXIT_NON_CONVERGENCE
    trace = pd.read_csv(out / 'trace.csv')
    assert list(trace['iteration']) == [0, 1]


def test_compare_writes_agreement_report(workspace):
    assert run(workspace, 'simulate', '--design', 'sim1', '--n', '40', '--seed', '1000',
               '--out', str(workspace / 'sim')) == EXIT_OK
    out = workspace / 'cmp'
    code = run(workspace, 'compare', '--formula', 'y ~ 1 | 1 | 1 | 1',
               '--data', str(workspace / 'sim' / 'data.csv'),
               '--iters', '3000', '--warmup', '1000', '--thin', '2', '--chains', '2',
               '--short-iters', '1000', '--out', str(out))
    assert code == EXIT_OK

    report = json.loads((out / 'agreement.json').read_text())
    assert set(report['methods']) == {'mcmc_short', 'mcmc_long'}
    assert report['methods']['mcmc_long']['n_kept'] == 2 * 1000
    timing = pd.read_csv(out / 'timing.csv')
    assert list(timing['method']) == ['laplace', 'mcmc_short', 'mcmc_long']
    plot = pd.read_csv(out / 'plot_data.csv')
    assert set(plot['method']) == {'laplace', 'mcmc_short', 'mcmc_long'}
    assert list(plot.columns) == ['coefficient', 'method', 'x', 'density']
    assert (out / 'draws_mcmc_long.csv').exists()


def test_runs_command_lists_log(workspace, sim2_data, capsys):
    capsys.readouterr()
    assert run(workspace, 'runs') == EXIT_OK
    assert 'simulate' in capsys.readouterr().out


def test_rerun_does_not_depend_on_environment(workspace, sim2_data, monkeypatch):
    args = ['fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data), '--draws', '300']
    assert run(workspace, *args, '--out', str(workspace / 'a')) == EXIT_OK
    manifest = json.loads((workspace / 'a' / 'manifest.json').read_text())
    assert manifest['arguments']['seed'] == 1000
    assert manifest['arguments']['prec'] == pytest.approx(1e-4)

    monkeypatch.setenv('DIRREG_SEED', '7')
    monkeypatch.setenv('DIRREG_PREC', '0.5')
    assert run(workspace, 'rerun', str(workspace / 'a' / 'manifest.json'),
               '--out', str(workspace / 'b')) == EXIT_OK
    assert (workspace / 'a' / 'fit.json').read_bytes() == (workspace / 'b' / 'fit.json').read_bytes()


def test_unexpected_error_exits_1_and_is_logged(workspace, sim2_data, monkeypatch):
    def singular(args, out, timer):
        raise np.linalg.LinAlgError('Singular matrix')

    monkeypatch.setitem(cli.COMMANDS, 'fit', singular)
    out = workspace / 'boom'
    code = run(workspace, 'fit', '--formula', SIM2_FORMULA, '--data', str(sim2_data), '--out', str(out))
    assert code == 1

    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'error'
    row = Database(str(workspace / 'runs.db')).get_runs(command='fit')[0]
    assert row['exit_code'] == 1
    assert 'LinAlgError' in row['error_message']
