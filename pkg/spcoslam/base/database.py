"""
Database for storing run history

There are two tables:
- runs: stores every dataset-gen, run, eval and sweep invocation
- metrics: stores the metric values computed for a run
"""

import json
import sqlite3
from datetime import datetime


class RunDatabase:
    def __init__(self, db_path="run_history.db"):
        self.db_path = db_path
        self.init_db()

    def init_db(self):
        """Initialize the database with necessary tables"""
        conn = sqlite3.connect(self.db_path)
        c = conn.cursor()

        # Create runs table
        c.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                session_id TEXT NOT NULL,
                command TEXT NOT NULL,
                method TEXT,
                seed INTEGER,
                particles INTEGER,
                config TEXT,
                output_dir TEXT,
                status TEXT NOT NULL,
                started_at TEXT NOT NULL,
                finished_at TEXT
            )
        """
        )

        # Create metrics table
        c.execute(
            """
            CREATE TABLE IF NOT EXISTS metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER,
                step INTEGER,
                metric TEXT NOT NULL,
                value REAL,
                FOREIGN KEY (run_id) REFERENCES runs (id)
            )
        """
        )

        conn.commit()
        conn.close()

    def record_run(
        self,
        session_id,
        command,
        method=None,
        seed=None,
        particles=None,
        config=None,
        output_dir=None,
    ):
        """Record a new run in the running state"""
        conn = sqlite3.connect(self.db_path)
        c = conn.cursor()

        c.execute(
            """
            INSERT INTO runs (
                session_id, command, method, seed, particles,
                config, output_dir, status, started_at
            )
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        """,
            (
                session_id,
                command,
                method,
                seed,
                particles,
                json.dumps(config, sort_keys=True) if config is not None else None,
                output_dir,
                "running",
                datetime.now().isoformat(),
            ),
        )

        run_id = c.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def finish_run(self, run_id, status="ok"):
        """Mark a run as finished with the given status"""
        conn = sqlite3.connect(self.db_path)
        c = conn.cursor()

        c.execute(
            "UPDATE runs SET status = ?, finished_at = ? WHERE id = ?",
            (status, datetime.now().isoformat(), run_id),
        )

        conn.commit()
        conn.close()

    def record_metrics(self, run_id, rows):
        """Record (step, metric, value) rows for a run"""
        conn = sqlite3.connect(self.db_path)
        c = conn.cursor()

        c.executemany(
            "INSERT INTO metrics (run_id, step, metric, value) VALUES (?, ?, ?, ?)",
            [
                (run_id, None if step is None else int(step), metric, float(value))
                for step, metric, value in rows
            ],
        )

        conn.commit()
        conn.close()
