import sqlite3
import json
import logging
from datetime import datetime
from typing import List, Dict, Any, Optional


class Database:
    def __init__(self, db_path='runs.db'):
        self.db_path = db_path
        self.logger = logging.getLogger(__name__)
        self.init_db()

    def init_db(self):
        """Initialize the database with required tables"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        # One row per CLI invocation
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                formula TEXT,
                manifest TEXT NOT NULL,
                status TEXT NOT NULL,
                exit_code INTEGER DEFAULT 0,
                error_message TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS stage_timings (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                stage TEXT NOT NULL,
                seconds REAL NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs (id)
            )
        ''')

        cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_timings_run ON stage_timings(run_id)')

        conn.commit()
        conn.close()

    def log_run(self, manifest: Dict[str, Any], status: str = 'success',
                exit_code: int = 0, error_message: Optional[str] = None) -> int:
        """Record a run and its stage timings, returning the run id"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        try:
            cursor.execute('''
                INSERT INTO runs (command, formula, manifest, status, exit_code, error_message, created_at)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            ''', (
                manifest.get('command', ''),
                manifest.get('formula'),
                json.dumps(manifest, sort_keys=True),
                status,
                exit_code,
                error_message,
                datetime.now().isoformat(),
            ))
            run_id = cursor.lastrowid

            for stage, seconds in manifest.get('timings', {}).items():
                cursor.execute('''
                    INSERT INTO stage_timings (run_id, stage, seconds) VALUES (?, ?, ?)
                ''', (run_id, stage, float(seconds)))

            conn.commit()
            return run_id
        except sqlite3.Error as e:
            self.logger.error(f"Error logging run: {e}")
            conn.rollback()
            return 0
        finally:
            conn.close()

    def get_runs(self, command: Optional[str] = None, limit: int = 20) -> List[Dict[str, Any]]:
        """Most recent runs first"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        query = 'SELECT id, command, formula, status, exit_code, error_message, created_at FROM runs'
        params: list = []
        if command:
            query += ' WHERE command = ?'
            params.append(command)
        query += ' ORDER BY id DESC LIMIT ?'
        params.append(limit)

        cursor.execute(query, params)
        runs = [
            {
                'id': row[0],
                'command': row[1],
                'formula': row[2],
                'status': row[3],
                'exit_code': row[4],
                'error_message': row[5],
                'created_at': row[6],
            }
            for row in cursor.fetchall()
        ]
        conn.close()
        return runs

    def get_run_manifest(self, run_id: int) -> Optional[Dict[str, Any]]:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('SELECT manifest FROM runs WHERE id = ?', (run_id,))
        row = cursor.fetchone()
        conn.close()
        return json.loads(row[0]) if row else None

    def get_stage_timings(self, run_id: int) -> Dict[str, float]:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('SELECT stage, seconds FROM stage_timings WHERE run_id = ? ORDER BY id', (run_id,))
        timings = {stage: seconds for stage, seconds in cursor.fetchall()}
        conn.close()
        return timings

    def get_stats(self) -> Dict[str, Any]:
        """Run counts by command and status, and mean stage timings"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('SELECT COUNT(*) FROM runs')
        total_runs = cursor.fetchone()[0]

        cursor.execute('SELECT command, COUNT(*) FROM runs GROUP BY command')
        command_stats = dict(cursor.fetchall())

        cursor.execute('SELECT status, COUNT(*) FROM runs GROUP BY status')
        status_stats = dict(cursor.fetchall())

        cursor.execute('SELECT stage, AVG(seconds) FROM stage_timings GROUP BY stage')
        mean_timings = dict(cursor.fetchall())

        conn.close()

        return {
            'total_runs': total_runs,
            'command_stats': command_stats,
            'status_stats': status_stats,
            'mean_stage_seconds': mean_timings,
        }
