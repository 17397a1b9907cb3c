"""Tests for skills.attack.scripts.run_attack: per-fold attacks and the curve CSV."""

import json
import shutil
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from attack import greedy_attack, random_baseline, sgd_attack
from config import ConfigError, parse_run_config
from pipeline import prepare_run
from run_attack import CURVE_COLUMNS, CURVE_NAME, REPORT_NAME, attack_config, attack_folds, cmd_attack

SCRIPT_PATH = (
    Path(__file__).resolve().parent.parent.parent.parent
    / "fragility"
    / "skills"
    / "attack"
    / "scripts"
    / "run_attack.py"
)


def _config(out_dir: Path, **attack) -> dict:
    return {
        "dataset": {"synth": {"n": 60, "d": 3}},
        "attack": {"folds": 2, **attack},
        "output": {"dir": str(out_dir)},
    }


class TestAttackFolds(unittest.TestCase):

    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_greedy_rows_per_fold(self):
        run = prepare_run(parse_run_config(_config(self.tmpdir, method="greedy", M=14)))
        report, rows = attack_folds(run)
        self.assertEqual(len(rows), 2 * 15)
        self.assertEqual(report["summary"]["rows"], 30)
        self.assertEqual([f["fold"] for f in report["folds"]], [0, 1])
        for fold in report["folds"]:
            self.assertEqual(len(fold["removed_indices"]), 14)
            self.assertEqual(len(fold["curve"]), 15)

    def test_random_rows_per_trial(self):
        run = prepare_run(parse_run_config(_config(self.tmpdir, method="random", M=4, trials=3)))
        report, rows = attack_folds(run)
        self.assertEqual(len(rows), 3 * 5 * 2)
        self.assertTrue(all(row["method"] == "random" for row in rows))
        self.assertIsNotNone(report["summary"]["mean_invalidation_rate"])

    def test_action_metric_with_gradient_recourse_is_config_error(self):
        data = _config(self.tmpdir, metric="action_sum", M=2)
        data["recourse"] = {"kind": "gradient", "iters": 50}
        run = prepare_run(parse_run_config(data))
        with self.assertRaises(ConfigError):
            attack_folds(run)

    def test_cmd_attack_writes_outputs(self):
        cmd_attack(parse_run_config(_config(self.tmpdir, M=3)))
        frame = pd.read_csv(self.tmpdir / CURVE_NAME)
        self.assertEqual(list(frame.columns), CURVE_COLUMNS)
        self.assertEqual(len(frame), 2 * 4)
        self.assertEqual(sorted(frame["k"].unique().tolist()), [0, 1, 2, 3])
        self.assertTrue((frame.loc[frame["k"] == 0, "invalidation_rate"] == 0.0).all())
        report = json.loads((self.tmpdir / REPORT_NAME).read_text())
        self.assertEqual(report["summary"]["method"], "greedy")


class TestRunAttackCli(unittest.TestCase):
    """Tests for the ``python run_attack.py`` CLI."""

    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _run(self, data: dict, *extra: str) -> subprocess.CompletedProcess:
        config = self.tmpdir / "run.json"
        config.write_text(json.dumps(data))
        return subprocess.run(
            [sys.executable, str(SCRIPT_PATH), "--config", str(config), *extra],
            capture_output=True,
            text=True,
        )

    def test_csv_is_byte_identical_across_runs(self):
        first = self.tmpdir / "first"
        second = self.tmpdir / "second"
        for out in (first, second):
            result = self._run(_config(out, M=4))
            self.assertEqual(result.returncode, 0, msg=result.stderr)
        self.assertEqual((first / CURVE_NAME).read_bytes(), (second / CURVE_NAME).read_bytes())

    def test_csv_header(self):
        out = self.tmpdir / "out"
        result = self._run(_config(out, M=2))
        self.assertEqual(result.returncode, 0, msg=result.stderr)
        header = (out / CURVE_NAME).read_text().splitlines()[0]
        self.assertEqual(header, ",".join(CURVE_COLUMNS))

    def test_seed_override_recorded(self):
        out = self.tmpdir / "out"
        result = self._run(_config(out, M=2), "--seed", "3")
        self.assertEqual(result.returncode, 0, msg=result.stderr)
        frame = pd.read_csv(out / CURVE_NAME)
        self.assertTrue((frame["seed"] == 3).all())

    def test_bad_method_exits_2(self):
        result = self._run(_config(self.tmpdir, method="annealing"))
        self.assertEqual(result.returncode, 2)
        self.assertIn("attack.method", json.loads(result.stdout)["error"]["message"])


class TestPlantedOutlierEffectiveness(unittest.TestCase):
    """Greedy and SGD removals against the random baseline on planted outliers."""

    SEEDS = (0, 3, 6, 8)

    def _run(self, seed: int):
        data = {
            "seed": seed,
            "dataset": {"synth": {"n": 125, "d": 3, "noise_sd": 0.1, "outlier_fraction": 0.05}},
            "attack": {"M": 5, "folds": 1},
        }
        run = prepare_run(parse_run_config(data))
        return run.train, run.prescriptions(), attack_config(run)

    def test_beat_random_mean_by_twenty_points(self):
        for seed in self.SEEDS:
            with self.subTest(seed=seed):
                train, prescribed, cfg = self._run(seed)
                self.assertEqual(train.n, 100)
                baseline = random_baseline(train, prescribed, cfg, trials=20).ground_truth["invalidation_rate"]
                greedy = greedy_attack(train, prescribed, cfg).ground_truth["invalidation_rate"]
                sgd = sgd_attack(train, prescribed, cfg).ground_truth["invalidation_rate"]
                self.assertGreaterEqual(greedy, baseline + 0.2)
                self.assertGreaterEqual(sgd, baseline + 0.2)


if __name__ == "__main__":
    unittest.main()
