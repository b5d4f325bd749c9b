import json
import os
import sqlite3
import unittest

from spcoslam.base.database import RunDatabase


class TestRunDatabase(unittest.TestCase):
    def setUp(self):
        """Set up test database before each test"""
        self.test_db_path = "test_run_history.db"
        self.db = RunDatabase(self.test_db_path)

    def tearDown(self):
        """Clean up test database after each test"""
        if os.path.exists(self.test_db_path):
            os.remove(self.test_db_path)

    def test_init_db(self):
        """Test if database is properly initialized with required tables"""
        conn = sqlite3.connect(self.test_db_path)
        cursor = conn.cursor()

        cursor.execute("SELECT name FROM sqlite_master WHERE type='table'")
        tables = {table[0] for table in cursor.fetchall()}

        self.assertIn("runs", tables)
        self.assertIn("metrics", tables)

        conn.close()

    def test_record_run(self):
        """Test recording a new run"""
        run_id = self.db.record_run(
            session_id="test_session",
            command="run",
            method="spcoslam",
            seed=3,
            particles=30,
            config={"seed": 3},
            output_dir="runs/spcoslam/seed_3",
        )

        conn = sqlite3.connect(self.test_db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT * FROM runs WHERE id=?", (run_id,))
        result = cursor.fetchone()
        conn.close()

        self.assertIsNotNone(result)
        self.assertEqual(result[1], "test_session")
        self.assertEqual(result[2], "run")
        self.assertEqual(result[3], "spcoslam")
        self.assertEqual(result[4], 3)
        self.assertEqual(result[5], 30)
        self.assertEqual(json.loads(result[6]), {"seed": 3})
        self.assertEqual(result[7], "runs/spcoslam/seed_3")
        self.assertEqual(result[8], "running")
        self.assertIsNone(result[10])

    def test_record_run_without_details(self):
        """Test recording a run with only the required fields"""
        run_id = self.db.record_run(session_id="test_session", command="sweep")

        conn = sqlite3.connect(self.test_db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT config, method FROM runs WHERE id=?", (run_id,))
        result = cursor.fetchone()
        conn.close()

        self.assertEqual(result, (None, None))

    def test_finish_run(self):
        """Test marking a run as finished"""
        run_id = self.db.record_run(session_id="test_session", command="eval")
        self.db.finish_run(run_id, "failed")

        conn = sqlite3.connect(self.test_db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT status, finished_at FROM runs WHERE id=?", (run_id,))
        status, finished_at = cursor.fetchone()
        conn.close()

        self.assertEqual(status, "failed")
        self.assertIsNotNone(finished_at)

    def test_record_metrics(self):
        """Test recording metric rows for a run"""
        run_id = self.db.record_run(session_id="test_session", command="eval")
        self.db.record_metrics(run_id, [(None, "nmi_C", 0.75), (12, "curve_L", 4)])

        conn = sqlite3.connect(self.test_db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT run_id, step, metric, value FROM metrics ORDER BY id")
        rows = cursor.fetchall()
        conn.close()

        self.assertEqual(rows, [(run_id, None, "nmi_C", 0.75), (run_id, 12, "curve_L", 4.0)])


if __name__ == "__main__":
    unittest.main()
