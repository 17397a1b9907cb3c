"""Shared run preparation for the command-line entry points.

Turns a validated :class:`RunConfig` into a fitted model, a recourse target
and fold-split factual points, and provides the flag parsing, logging setup,
report writing and exit-code handling every command shares.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

_fit_scripts = str(Path(__file__).resolve().parent.parent.parent / "fit" / "scripts")
if _fit_scripts not in sys.path:
    sys.path.insert(0, _fit_scripts)

from config import ConfigError, RunConfig, apply_overrides, read_run_config
from data import (
    Dataset,
    DatasetError,
    FoldSplit,
    RecourseTargeting,
    StandardizationState,
    load_csv,
    make_folds,
    median_target,
    standardize,
    synth_classification,
    synth_regression,
    train_test_split,
)
from models import ModelSpec, fit_model, predict_scores
from recourse import PrescribedRecourses, RecourseConfig, make_recourse_config, prescribe_recourses

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_CONFIG = 2


@dataclass(eq=False)
class PreparedRun:
    """Everything a command needs after data preparation and the full-data fit."""

    config: RunConfig
    train: Dataset
    test: Dataset
    scaler: Optional[StandardizationState]
    spec: ModelSpec
    model: object
    targeting: RecourseTargeting
    recourse: RecourseConfig
    factual_indices: np.ndarray
    folds: FoldSplit

    @property
    def factuals(self) -> np.ndarray:
        return self.test.X[self.factual_indices]

    def fold_factuals(self, fold: int) -> np.ndarray:
        return self.factuals[self.folds.indices(fold)]

    def prescriptions(self, fold: Optional[int] = None) -> PrescribedRecourses:
        X = self.factuals if fold is None else self.fold_factuals(fold)
        return prescribe_recourses(self.model, X, self.recourse, self.config.recourse.kind)


# ------------------------------------------------------------------
# Preparation
# ------------------------------------------------------------------


def load_dataset(config: RunConfig) -> Dataset:
    """Read the CSV named in the config, or generate the configured synthetic set."""
    section = config.dataset
    if section.csv is not None:
        return load_csv(Path(section.csv), section.target_column)
    synth = section.synth
    if synth.task == "classification":
        return synth_classification(synth.n, synth.d, config.seed, synth.outlier_fraction)
    return synth_regression(synth.n, synth.d, synth.noise_sd, synth.outlier_fraction, config.seed)


def _is_classification(ds: Dataset) -> bool:
    return bool(np.all((ds.y == 0.0) | (ds.y == 1.0)))


def prepare_run(config: RunConfig, folds: Optional[int] = None) -> PreparedRun:
    """Load, split 80/20 (by default), standardize, fit and target a run.

    The target score is the lower median of the full-data model's test
    scores unless ``recourse.s_mode`` is ``"explicit"``.  Test points scoring
    strictly below it are the factuals; they are split into balanced folds.
    """
    ds = load_dataset(config)
    train, test = train_test_split(ds, config.dataset.test_fraction, config.seed)

    scaler = None
    if config.dataset.standardize:
        train, scaler = standardize(train)
        test = Dataset(scaler.transform(test.X), test.y, test.feature_names, dict(test.provenance))

    spec = ModelSpec(config.model.kind, config.model.beta, config.model.l2)
    if spec.kind == "logistic" and not _is_classification(train):
        raise ConfigError("Invalid config key model.kind: logistic needs 0/1 targets")
    if config.dataset.center_target and spec.kind != "logistic":
        offset = float(train.y.mean())
        train = Dataset(train.X, train.y - offset, train.feature_names,
                        {**train.provenance, "target_offset": offset})
        test = Dataset(test.X, test.y - offset, test.feature_names,
                       {**test.provenance, "target_offset": offset})

    model = fit_model(train, None, spec)
    test_scores = predict_scores(model, test.X)
    if config.recourse.s_mode == "explicit":
        s = float(config.recourse.s)
        targeting = RecourseTargeting(s, test_scores < s)
    else:
        targeting = median_target(test_scores)

    factual_indices = np.flatnonzero(targeting.needs_recourse)
    if factual_indices.size == 0:
        raise DatasetError(f"No test point scores below the target s={targeting.s:.6g}")
    n_folds = config.attack.folds if folds is None else folds
    split = make_folds(factual_indices.size, min(n_folds, factual_indices.size), config.seed)
    logger.info(
        "Prepared %s model on %d training rows; s=%.6g, %d factuals in %d folds",
        spec.kind, train.n, targeting.s, factual_indices.size, split.folds,
    )
    return PreparedRun(
        config, train, test, scaler, spec, model, targeting,
        make_recourse_config(targeting.s, config.recourse),
        factual_indices, split,
    )


# ------------------------------------------------------------------
# Command plumbing
# ------------------------------------------------------------------


def build_parser(description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--config", default=None, help="Path to a JSON run configuration.")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed.")
    parser.add_argument("--out-dir", default=None, help="Override the output directory.")
    parser.add_argument("--verbose", action="store_true", help="Log progress to stderr.")
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def load_config(args: argparse.Namespace) -> RunConfig:
    config = read_run_config(Path(args.config) if args.config else None)
    return apply_overrides(config, seed=args.seed, out_dir=args.out_dir)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, default=_jsonable)


def write_report(out_dir: Path, name: str, report: dict) -> Path:
    """Write *report* as ``<out_dir>/<name>`` (indented JSON, trailing newline)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(dumps(report) + "\n", encoding="utf-8")
    return path


def run_command(body: Callable[[RunConfig], dict], args: argparse.Namespace) -> int:
    """Run a command body and map failures onto exit codes.

    Configuration errors exit with 2, numeric failures with 1.  The report
    (or the error block) is printed to stdout as JSON.
    """
    configure_logging(args.verbose)
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(dumps({"error": {"type": "ConfigError", "message": str(exc)}}))
        return EXIT_CONFIG
    try:
        report = body(config)
    except ConfigError as exc:
        print(dumps({"error": {"type": "ConfigError", "message": str(exc)}}))
        return EXIT_CONFIG
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return EXIT_NUMERIC
    if config.output.format == "summary":
        print(dumps(report.get("summary", {})))
    else:
        print(dumps(report))
    return EXIT_OK
