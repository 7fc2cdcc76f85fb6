"""
Database module for the ShuffleGuard run registry
Records training/evaluation runs and their report rows in SQLite
"""

import os
import sqlite3
from datetime import datetime
from typing import Dict, List, Optional

from services.reporting import AccuracyReport

# Database configuration
DATABASE = os.environ.get('SHUFFLEGUARD_DB', 'shuffleguard.db')


def get_db_connection():
    """Get a database connection."""
    conn = sqlite3.connect(DATABASE)
    conn.row_factory = sqlite3.Row  # This enables column access by name
    return conn


def init_database():
    """Initialize the database with required tables."""
    conn = get_db_connection()

    conn.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            kind TEXT NOT NULL,
            manifest_hash TEXT NOT NULL,
            artifact_path TEXT NOT NULL,
            created_at TEXT NOT NULL,
            sample_count INTEGER NOT NULL DEFAULT 0,
            wall_time REAL NOT NULL DEFAULT 0
        )
    ''')

    conn.execute('''
        CREATE TABLE IF NOT EXISTS report_rows (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            condition TEXT NOT NULL,
            block_size INTEGER NOT NULL,
            epsilon REAL NOT NULL,
            iterations INTEGER NOT NULL,
            random_init INTEGER NOT NULL,
            key_match INTEGER,
            clean_acc REAL NOT NULL,
            attacked_acc REAL NOT NULL,
            FOREIGN KEY (run_id) REFERENCES runs (id)
        )
    ''')

    conn.commit()
    conn.close()


# Helper Functions for Database Operations

def insert_run(kind: str, manifest_hash: str, artifact_path: str, sample_count: int = 0,
               wall_time: float = 0.0) -> Optional[int]:
    """Insert a run record and return its id (None on failure)."""
    conn = get_db_connection()
    try:
        cursor = conn.execute('''
            INSERT INTO runs (kind, manifest_hash, artifact_path, created_at, sample_count, wall_time)
            VALUES (?, ?, ?, ?, ?, ?)
        ''', (kind, manifest_hash, str(artifact_path), datetime.now().isoformat(), sample_count, wall_time))
        conn.commit()
        return cursor.lastrowid
    except sqlite3.Error:
        return None
    finally:
        conn.close()


def insert_report_rows(run_id: int, report: AccuracyReport) -> bool:
    """Insert every row of a report under a run."""
    conn = get_db_connection()
    try:
        conn.executemany('''
            INSERT INTO report_rows (run_id, condition, block_size, epsilon, iterations, random_init,
                                     key_match, clean_acc, attacked_acc)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', [(run_id, row.condition, row.block_size, row.epsilon, row.iterations, int(row.random_init),
               None if row.key_match is None else int(row.key_match), row.clean_acc, row.attacked_acc)
              for row in report.rows])
        conn.commit()
        return True
    except sqlite3.Error:
        return False
    finally:
        conn.close()


def record_report(kind: str, artifact_path: str, report: AccuracyReport) -> Optional[int]:
    """Insert a run together with its report rows."""
    run_id = insert_run(kind, report.manifest_hash, artifact_path, report.sample_count, report.wall_time)
    if run_id is not None:
        insert_report_rows(run_id, report)
    return run_id


def get_all_runs() -> List[Dict]:
    """Get all runs, newest first."""
    conn = get_db_connection()
    runs = conn.execute('SELECT * FROM runs ORDER BY id DESC').fetchall()
    conn.close()
    return [dict(run) for run in runs]


def get_run_by_id(run_id: int) -> Optional[Dict]:
    """Get a specific run by ID."""
    conn = get_db_connection()
    run = conn.execute('SELECT * FROM runs WHERE id = ?', (run_id,)).fetchone()
    conn.close()
    return dict(run) if run else None


def get_report_rows(run_id: int) -> List[Dict]:
    """Get the report rows of a run in insertion order."""
    conn = get_db_connection()
    rows = conn.execute('SELECT * FROM report_rows WHERE run_id = ? ORDER BY id', (run_id,)).fetchall()
    conn.close()
    result = []
    for row in rows:
        entry = dict(row)
        entry['random_init'] = bool(entry['random_init'])
        entry['key_match'] = None if entry['key_match'] is None else bool(entry['key_match'])
        result.append(entry)
    return result
