"""Tests for skills.recourse.scripts.pipeline: run preparation and command plumbing."""

import io
import json
import shutil
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np

from config import ConfigError, parse_run_config
from data import DatasetError
from models import LinearModel, predict_scores
from pipeline import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    build_parser,
    dumps,
    prepare_run,
    run_command,
    write_report,
)


def _config(**sections):
    data = {"dataset": {"synth": {"n": 60, "d": 3}}, **sections}
    return parse_run_config(data)


class TestPrepareRun(unittest.TestCase):

    def test_default_split_and_target(self):
        run = prepare_run(_config())
        self.assertEqual((run.train.n, run.test.n), (48, 12))
        self.assertIsInstance(run.model, LinearModel)
        scores = predict_scores(run.model, run.test.X)
        self.assertEqual(run.targeting.s, float(np.sort(scores)[(scores.size - 1) // 2]))
        self.assertTrue(np.all(predict_scores(run.model, run.factuals) < run.targeting.s))
        self.assertEqual(run.factual_indices.size, 5)

    def test_target_centered(self):
        run = prepare_run(_config())
        self.assertLess(abs(run.train.y.mean()), 1e-12)
        self.assertIn("target_offset", run.train.provenance)

    def test_standardized_train(self):
        run = prepare_run(_config())
        np.testing.assert_allclose(run.train.X.mean(axis=0), 0.0, atol=1e-12)

    def test_folds_capped_by_factuals(self):
        run = prepare_run(_config(attack={"folds": 50}))
        self.assertEqual(run.folds.folds, run.factual_indices.size)
        covered = np.concatenate([run.folds.indices(f) for f in range(run.folds.folds)])
        self.assertEqual(sorted(covered.tolist()), list(range(run.factual_indices.size)))

    def test_explicit_target(self):
        run = prepare_run(_config(recourse={"s_mode": "explicit", "s": 1e6}))
        self.assertEqual(run.factual_indices.size, run.test.n)
        self.assertEqual(run.recourse.s, 1e6)
        self.assertEqual(run.recourse.validity_margin, 1e-4)

    def test_no_factuals(self):
        with self.assertRaises(DatasetError):
            prepare_run(_config(recourse={"s_mode": "explicit", "s": -1e6}))

    def test_logistic_needs_labels(self):
        with self.assertRaises(ConfigError):
            prepare_run(_config(model={"kind": "logistic"}))

    def test_logistic_classification(self):
        config = parse_run_config({
            "dataset": {"synth": {"task": "classification", "n": 60, "d": 2}},
            "model": {"kind": "logistic"},
        })
        run = prepare_run(config)
        self.assertTrue(0.0 < run.targeting.s < 1.0)
        self.assertNotIn("target_offset", run.train.provenance)

    def test_prescriptions_per_fold(self):
        run = prepare_run(_config(attack={"folds": 2}))
        total = sum(run.prescriptions(f).q for f in range(2))
        self.assertEqual(total, run.prescriptions().q)


class TestCommandPlumbing(unittest.TestCase):

    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _run(self, body, argv):
        args = build_parser("test").parse_args(argv)
        out = io.StringIO()
        with redirect_stdout(out):
            code = run_command(body, args)
        return code, json.loads(out.getvalue())

    def test_success(self):
        code, payload = self._run(lambda config: {"summary": {"seed": config.seed}}, ["--seed", "4"])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload["summary"]["seed"], 4)

    def test_numeric_failure(self):
        def body(config):
            raise ArithmeticError("overflow")
        code, payload = self._run(body, [])
        self.assertEqual(code, EXIT_NUMERIC)
        self.assertEqual(payload["error"]["type"], "ArithmeticError")

    def test_config_failure(self):
        path = self.tmpdir / "bad.json"
        path.write_text(json.dumps({"model": {"kind": "linear", "colour": 1}}))
        code, payload = self._run(lambda config: {}, ["--config", str(path)])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("model.colour", payload["error"]["message"])

    def test_summary_format(self):
        path = self.tmpdir / "run.json"
        path.write_text(json.dumps({"output": {"format": "summary"}}))
        code, payload = self._run(lambda config: {"points": [1, 2], "summary": {"n": 2}}, ["--config", str(path)])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(payload, {"n": 2})

    def test_write_report_numpy(self):
        path = write_report(self.tmpdir / "out", "r.json", {"a": np.arange(3), "b": np.float64(0.5)})
        self.assertEqual(json.loads(path.read_text()), {"a": [0, 1, 2], "b": 0.5})
        self.assertTrue(path.read_text().endswith("\n"))

    def test_dumps_rejects_objects(self):
        with self.assertRaises(TypeError):
            dumps({"x": object()})


if __name__ == "__main__":
    unittest.main()
