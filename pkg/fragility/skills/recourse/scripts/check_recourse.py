"""Single-deletion audit of prescribed recourses.

For every audited test point, every single training deletion is applied to
the full-data model and the prescribed recourse is re-scored.  The report
lists outcome and action instability per point, the matching upper bounds,
and an issue for every bound violation or skipped check.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np

_fit_scripts = str(Path(__file__).resolve().parent.parent.parent / "fit" / "scripts")
if _fit_scripts not in sys.path:
    sys.path.insert(0, _fit_scripts)

from config import RunConfig
from history import record_run
from influence import LeverageError, apply_link, make_updater
from instability import (
    DiametricalChangeError,
    InstabilityReport,
    bound_action_linear,
    bound_action_path,
    bound_outcome_linear,
    bound_outcome_ntk,
)
from models import ConvergenceError, SingularSystemError
from pipeline import PreparedRun, build_parser, prepare_run, run_command, write_report
from recourse import ActionCache, build_action_cache, closed_form_action_jacobians, closed_form_actions

logger = logging.getLogger(__name__)

REPORT_NAME = "audit.json"


def _deletion_candidates(run: PreparedRun):
    """Parameters after each single deletion (columns) and a feasibility mask."""
    updater = make_updater(run.train, run.spec)
    n = run.train.n
    if run.spec.kind != "logistic":
        P, feasible = updater.deletion_candidates(np.ones(n), run.model.params)
        return updater, P, feasible
    # Logistic deletions are refit exactly; there is no closed form.
    P = np.tile(run.model.params[:, None], (1, n))
    feasible = np.ones(n, dtype=bool)
    for i in range(n):
        omega = np.ones(n)
        omega[i] = 0.0
        try:
            P[:, i] = updater.exact(omega)
        except (ConvergenceError, SingularSystemError) as exc:
            logger.info("Refit without row %d failed: %s", i, exc)
            feasible[i] = False
    return updater, P, feasible


def _single_point_cache(cache: ActionCache, j: int) -> ActionCache:
    return ActionCache(
        cache.factuals[j:j + 1], cache.features[j:j + 1], cache.input_jacobians[j:j + 1], cache.link
    )


def _issue(point: int, deletion, message: str, severity: str) -> dict:
    return {"point": int(point), "deletion": deletion, "message": message, "severity": severity}


def audit_points(run: PreparedRun) -> dict:
    """Run the single-deletion audit on *run* and return the report dict."""
    audit = run.config.audit
    prescribed = run.prescriptions()
    limit = min(audit.max_points, prescribed.q)
    point_ids = run.factual_indices[:limit]
    closed = run.config.recourse.kind == "closed"
    cfg = run.recourse
    issues: list[dict] = []
    reports: list[InstabilityReport] = []

    excluded = int(np.sum(~prescribed.valid[:limit]))
    for j in np.flatnonzero(~prescribed.valid[:limit]):
        issues.append(_issue(point_ids[j], None,
                             f"Prescribed recourse misses the target (score {prescribed.scores[j]:.6g})",
                             "warn"))

    if not audit.deletions:
        for j in range(limit):
            reports.append(InstabilityReport(int(point_ids[j]), [], np.zeros(1), np.zeros(1, dtype=bool),
                                             action=np.zeros(1)))
        return _build_report(run, reports, issues, prescribed, limit, excluded, deletions=0)

    updater, P, feasible = _deletion_candidates(run)
    deleted = np.flatnonzero(feasible)
    for i in np.flatnonzero(~feasible):
        issues.append(_issue(-1, int(i), "Deletion leaves a singular or divergent refit; skipped", "warn"))

    X_cf = prescribed.counterfactuals[:limit]
    features = updater.features(X_cf)
    old = apply_link(updater, features @ run.model.params)
    new = apply_link(updater, features @ P[:, deleted])
    outcome = np.abs(old[:, None] - new)
    invalidated = (new <= prescribed.threshold) & prescribed.valid[:limit, None]

    actions = None
    cache = None
    if closed:
        cache = build_action_cache(run.model, prescribed.factuals[:limit])
        base = prescribed.actions[:limit]
        actions = np.empty((limit, deleted.size))
        for col, i in enumerate(deleted):
            moved = closed_form_actions(cache, P[:, i], cfg.s, cfg.lam)
            actions[:, col] = np.linalg.norm(base - moved, ord=audit.p, axis=1)

    action_bound_note = None
    if run.spec.kind == "linear" and run.targeting.s != 0.0:
        action_bound_note = "skipped: the action bound is stated for target s = 0"
    elif run.spec.kind != "linear":
        action_bound_note = "skipped: no action bound for this model family"
    elif not closed or audit.p != 2.0:
        action_bound_note = "skipped: needs closed-form recourse and p = 2"

    for j in range(limit):
        point = int(point_ids[j])
        report = InstabilityReport(point, deleted.tolist(), outcome[j], invalidated[j],
                                   action=None if actions is None else actions[j])
        x_cf = X_cf[j]
        try:
            if run.spec.kind == "linear":
                report.bound_outcome = bound_outcome_linear(run.train, run.model, x_cf)
            elif run.spec.kind == "ntk":
                report.bound_outcome = bound_outcome_ntk(run.train, run.model, x_cf, updater.gram)
        except (LeverageError, SingularSystemError) as exc:
            issues.append(_issue(point, None, f"Outcome bound skipped: {exc}", "warn"))

        if action_bound_note is None:
            try:
                report.bound_action = bound_action_linear(run.train, run.model, prescribed.factuals[j])
            except DiametricalChangeError as exc:
                issues.append(_issue(point, None, f"Action bound skipped: {exc}", "warn"))

        if report.outcome_bound_holds is False:
            worst = int(deleted[np.argmax(outcome[j])])
            issues.append(_issue(point, worst,
                                 f"Outcome instability {outcome[j].max():.6g} exceeds bound "
                                 f"{report.bound_outcome:.6g}", "fail"))
        if report.action_bound_holds is False:
            worst = int(deleted[np.argmax(report.action)])
            issues.append(_issue(point, worst,
                                 f"Action instability {report.action.max():.6g} exceeds bound "
                                 f"{report.bound_action:.6g}", "fail"))

        if closed and run.spec.kind in ("linear", "ntk") and deleted.size:
            worst_col = int(np.argmax(report.action))
            single = _single_point_cache(cache, j)
            jacobian = None
            if run.spec.kind == "ntk":
                # Analytic Jacobian over the n dual parameters.
                jacobian = lambda theta, c=single: closed_form_action_jacobians(c, theta, cfg.s, cfg.lam)[0]
            path = bound_action_path(
                lambda theta, c=single: closed_form_actions(c, theta, cfg.s, cfg.lam)[0],
                run.model.params, P[:, deleted[worst_col]], audit.segments, jacobian,
            )
            report.notes.append(
                f"path bound {path.bound:.6g} vs measured {path.measured:.6g} "
                f"for deletion {int(deleted[worst_col])}"
            )
            if path.measured > path.bound * (1.0 + 1e-2) + 1e-12:
                issues.append(_issue(point, int(deleted[worst_col]),
                                     f"Path-integral bound {path.bound:.6g} below measured "
                                     f"{path.measured:.6g} beyond quadrature tolerance", "warn"))
        reports.append(report)

    result = _build_report(run, reports, issues, prescribed, limit, excluded, deletions=int(deleted.size))
    if action_bound_note is not None:
        result["summary"]["action_bound"] = action_bound_note
    return result


def _build_report(run, reports, issues, prescribed, limit, excluded, deletions) -> dict:
    points = []
    for j, rep in enumerate(reports):
        entry = {
            "point": rep.point,
            "score": float(prescribed.scores[j]),
            "valid": bool(prescribed.valid[j]),
            "max_outcome": float(np.max(rep.outcome)) if rep.outcome.size else 0.0,
            "invalidations": int(np.sum(rep.invalidated)),
            "bound_outcome": rep.bound_outcome,
            "outcome_bound_holds": rep.outcome_bound_holds,
            "max_action": None if rep.action is None or not rep.action.size else float(np.max(rep.action)),
            "bound_action": rep.bound_action,
            "action_bound_holds": rep.action_bound_holds,
        }
        if rep.notes:
            entry["notes"] = rep.notes
        points.append(entry)

    fail_count = sum(1 for i in issues if i["severity"] == "fail")
    warn_count = sum(1 for i in issues if i["severity"] == "warn")
    valid_points = int(np.sum(prescribed.valid[:limit]))
    invalidated = sum(e["invalidations"] for e in points if e["valid"])
    return {
        "points": points,
        "issues": issues,
        "summary": {
            "model": run.spec.kind,
            "s": float(run.targeting.s),
            "threshold": float(prescribed.threshold),
            "points": limit,
            "deletions": deletions,
            "valid_recourses": valid_points,
            "excluded": excluded,
            "invalidated_pairs": int(invalidated),
            "invalidation_rate": float(invalidated / (valid_points * deletions))
            if valid_points and deletions else 0.0,
            "fail_count": fail_count,
            "warn_count": warn_count,
        },
    }


def cmd_audit(config: RunConfig) -> dict:
    """Prepare the run, audit it and write ``audit.json`` into the output directory."""
    run = prepare_run(config)
    report = audit_points(run)
    out_dir = Path(config.output.dir)
    report["reproducibility"] = record_run(out_dir, "audit", config, report["summary"], [REPORT_NAME])
    write_report(out_dir, REPORT_NAME, report)
    return report


if __name__ == "__main__":
    parser = build_parser("Audit prescribed recourses against every single training deletion.")
    sys.exit(run_command(cmd_audit, parser.parse_args()))
