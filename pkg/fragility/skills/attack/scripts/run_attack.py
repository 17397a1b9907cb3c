"""Run a deletion attack per fold and write the tradeoff curve.

Outputs, inside the configured output directory:

- ``attack_curve.csv``: one row per (fold, k) with the ground-truth
  invalidation rate and metric value; random baselines write one row per
  (fold, trial, k)
- ``attack.json``: removed indices, final ground truth and the search's own
  curve per fold, plus a summary block
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

_skills = Path(__file__).resolve().parent.parent.parent
for _scripts in (_skills / "fit" / "scripts", _skills / "recourse" / "scripts"):
    if str(_scripts) not in sys.path:
        sys.path.insert(0, str(_scripts))

from attack import AttackConfig, AttackError, AttackResult, SgdSettings, run_method
from config import ConfigError, RunConfig
from history import record_run
from influence import make_updater
from pipeline import PreparedRun, build_parser, prepare_run, run_command, write_report

logger = logging.getLogger(__name__)

CURVE_NAME = "attack_curve.csv"
REPORT_NAME = "attack.json"
CURVE_COLUMNS = ["k", "invalidation_rate", "metric_value", "method", "fold", "seed"]


def attack_config(run: PreparedRun) -> AttackConfig:
    """Translate the run config's attack section, reporting bad combinations as config errors."""
    section = run.config.attack
    try:
        return AttackConfig(
            M=section.M,
            metric=section.metric,
            model=run.spec,
            recourse_kind=run.config.recourse.kind,
            lam=run.recourse.lam,
            seed=run.config.seed,
            sgd=SgdSettings(**section.sgd.model_dump()),
        )
    except AttackError as exc:
        raise ConfigError(f"Invalid config key attack: {exc}") from exc


def curve_rows(result: AttackResult, fold: int, seed: int) -> list[dict]:
    """CSV rows for one fold's result."""
    if result.trial_curves is not None:
        rows = []
        for trial in range(result.trial_curves.shape[0]):
            for k in range(result.trial_curves.shape[1]):
                rate, value = result.trial_curves[trial, k]
                rows.append({"k": k, "invalidation_rate": rate, "metric_value": value,
                             "method": result.method, "fold": fold, "seed": seed})
        return rows
    return [
        {"k": p.k, "invalidation_rate": p.invalidation_rate, "metric_value": p.metric_value,
         "method": result.method, "fold": fold, "seed": seed}
        for p in result.ground_truth_curve
    ]


def write_curve(path: Path, rows: list[dict]) -> Path:
    """Write curve rows with full float precision and ``\\n`` line endings."""
    frame = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    frame["k"] = frame["k"].astype(int)
    frame["fold"] = frame["fold"].astype(int)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    return path


def _curve_json(points) -> list[dict]:
    return [
        {"k": p.k, "metric_value": p.metric_value, "invalidation_rate": p.invalidation_rate,
         **({"sd": p.sd} if p.sd is not None else {})}
        for p in points
    ]


def attack_folds(run: PreparedRun) -> tuple[dict, list[dict]]:
    """Attack every fold in order; returns the JSON report and the CSV rows."""
    cfg = attack_config(run)
    method = run.config.attack.method
    updater = make_updater(run.train, run.spec)
    rows: list[dict] = []
    folds: list[dict] = []
    final_rates = []

    for fold in range(run.folds.folds):
        prescribed = run.prescriptions(fold)
        result = run_method(method, run.train, prescribed, cfg, run.config.attack.trials, updater)
        rows.extend(curve_rows(result, fold, run.config.seed))
        rate = result.ground_truth.get("invalidation_rate")
        if rate is not None:
            final_rates.append(rate)
        folds.append({
            "fold": fold,
            "factuals": prescribed.q,
            "excluded": result.excluded,
            "removed_indices": result.removed_indices,
            "ground_truth": result.ground_truth,
            "curve": _curve_json(result.curve),
        })
        logger.info("Fold %d: removed %s, ground-truth rate %s", fold, result.removed_indices, rate)

    report = {
        "folds": folds,
        "summary": {
            "method": method,
            "metric": cfg.metric,
            "model": run.spec.kind,
            "M": cfg.M,
            "folds": run.folds.folds,
            "s": float(run.targeting.s),
            "rows": len(rows),
            "mean_invalidation_rate": float(np.mean(final_rates)) if final_rates else None,
            "excluded": int(sum(f["excluded"] for f in folds)),
        },
    }
    return report, rows


def cmd_attack(config: RunConfig) -> dict:
    """Prepare the run, attack every fold and write the curve CSV and JSON report."""
    run = prepare_run(config)
    report, rows = attack_folds(run)
    out_dir = Path(config.output.dir)
    write_curve(out_dir / CURVE_NAME, rows)
    report["reproducibility"] = record_run(
        out_dir, "attack", config, report["summary"], [CURVE_NAME, REPORT_NAME]
    )
    write_report(out_dir, REPORT_NAME, report)
    return report


if __name__ == "__main__":
    parser = build_parser("Search for training deletions that invalidate prescribed recourses.")
    sys.exit(run_command(cmd_attack, parser.parse_args()))
