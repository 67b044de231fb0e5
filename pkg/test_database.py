#!/usr/bin/env python3
"""
Tests for the SQLite run log
"""

from database import Database


def make_manifest(command='fit', **timings):
    return {
        'command': command,
        'formula': 'y ~ 1 | 1',
        'arguments': {'out': 'out'},
        'timings': timings,
    }


def test_log_run_and_read_back(tmp_path):
    db = Database(str(tmp_path / 'runs.db'))
    run_id = db.log_run(make_manifest(posterior_mode=0.5, gaussian_posterior=0.25))
    assert run_id > 0

    runs = db.get_runs()
    assert len(runs) == 1
    assert runs[0]['command'] == 'fit'
    assert runs[0]['status'] == 'success'
    assert db.get_run_manifest(run_id)['arguments'] == {'out': 'out'}
    assert db.get_stage_timings(run_id) == {'posterior_mode': 0.5, 'gaussian_posterior': 0.25}


def test_failed_runs_and_stats(tmp_path):
    db = Database(str(tmp_path / 'runs.db'))
    db.log_run(make_manifest('simulate', simulate=1.0))
    db.log_run(make_manifest('fit', posterior_mode=3.0), status='error', exit_code=3,
               error_message='did not converge')
    db.log_run(make_manifest('fit', posterior_mode=1.0))

    failed = [r for r in db.get_runs(command='fit') if r['status'] == 'error']
    assert len(failed) == 1
    assert failed[0]['exit_code'] == 3

    stats = db.get_stats()
    assert stats['total_runs'] == 3
    assert stats['command_stats'] == {'fit': 2, 'simulate': 1}
    assert stats['status_stats'] == {'error': 1, 'success': 2}
    assert stats['mean_stage_seconds']['posterior_mode'] == 2.0


def test_missing_run(tmp_path):
    db = Database(str(tmp_path / 'runs.db'))
    assert db.get_run_manifest(42) is None
    assert db.get_stage_timings(42) == {}
