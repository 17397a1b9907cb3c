"""Numerical validation of the first-order counterfactual update.

Runs a fixed battery of checks and writes ``sensitivity.json``:

- ``scalar_exact``: one-point linear kernel, where the moved counterfactual
  ``t / (w + eps)`` is known in closed form
- ``ratio_test``: RBF kernel ridge, constraint residual shrinks as eps^2
- ``constraint_identity``: the minimal Jacobian satisfies ``J' v = u``
- ``minimality``: no sampled admissible Jacobian moves the point less
- ``oracle``: the linearization agrees with a constrained nearest-point solve
- ``degenerate``: ``v = 0`` with ``u != 0`` is reported, not raised
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np

_skills = Path(__file__).resolve().parent.parent.parent
for _scripts in (_skills / "fit" / "scripts", _skills / "recourse" / "scripts"):
    if str(_scripts) not in sys.path:
        sys.path.insert(0, str(_scripts))

from config import RunConfig
from data import Dataset
from history import record_run
from pipeline import build_parser, run_command, write_report
from sensitivity import (
    KernelSpec,
    NoSolutionError,
    build_context,
    constraint_identity_error,
    first_order_update,
    fit_kernel_ridge,
    jacobian_action,
    minimal_change_counterfactual_oracle,
    minimality_margin,
    ratio_test,
)

logger = logging.getLogger(__name__)

REPORT_NAME = "sensitivity.json"

SCALAR_TOLERANCE = 1e-8
IDENTITY_TOLERANCE = 1e-12
ORACLE_FACTOR = 10.0

# Ridge for the synthetic RBF problem and the number of candidate points
# screened for a well-conditioned counterfactual.
_RIDGE = 0.1
_CANDIDATES = 20


def _check(name: str, passed: bool, **measured) -> dict:
    return {"name": name, "status": "pass" if passed else "fail", **measured}


def check_scalar(eps: float) -> dict:
    """n = 1, d = 1 linear kernel: ``x_cf = t / w``, exact after the move."""
    X = np.array([[1.0]])
    w0, t = 2.0, 1.0
    ctx = build_context(X, KernelSpec("linear"), [w0], [t / w0], t)
    moved = first_order_update(ctx, [1.0], eps)
    exact = t / (w0 + eps)
    error = abs(float(moved[0]) - exact)
    slope = float(jacobian_action(ctx, [1.0])[0])
    return _check("scalar_exact", error <= SCALAR_TOLERANCE, error=error, tolerance=SCALAR_TOLERANCE,
                  slope=slope, expected_slope=-t / w0 ** 2)


def rbf_problem(n: int, d: int, gamma: float, seed: int):
    """Random RBF kernel ridge problem and a counterfactual with a large score gradient."""
    rng = np.random.default_rng([seed, 1])
    X = rng.normal(size=(n, d))
    ds = Dataset(X, rng.normal(size=n), tuple(f"x{j}" for j in range(d)))
    kernel = KernelSpec("rbf", gamma=gamma)
    w = fit_kernel_ridge(ds, kernel, _RIDGE)

    candidates = X[rng.integers(0, n, size=_CANDIDATES)] + 0.5 * rng.normal(size=(_CANDIDATES, d))
    strength = [np.linalg.norm(kernel.jacobian(x, X).T @ w) for x in candidates]
    x_cf = candidates[int(np.argmax(strength))]
    t = float(kernel.features(x_cf, X) @ w)
    dw = rng.normal(size=n)
    return ds, kernel, w, x_cf, t, dw / np.linalg.norm(dw)


def check_rbf(config: RunConfig) -> list[dict]:
    section = config.sensitivity
    eps = section.eps
    ds, kernel, w, x_cf, t, dw = rbf_problem(section.n, section.d, section.rbf_gamma, config.seed)
    ctx = build_context(ds, kernel, w, x_cf, t)
    checks = []

    ratios = ratio_test(ctx, dw, eps)
    checks.append(_check("ratio_test", ratios.passed, eps=list(ratios.eps), residuals=list(ratios.residuals),
                         ratios=list(ratios.ratios), window=[ratios.low, ratios.high]))

    identity = constraint_identity_error(ctx)
    checks.append(_check("constraint_identity", identity <= IDENTITY_TOLERANCE, error=identity,
                         tolerance=IDENTITY_TOLERANCE))

    margin = minimality_margin(ctx, dw, section.minimality_samples, config.seed)
    checks.append(_check("minimality", margin >= -1e-12, min_margin=margin,
                         samples=section.minimality_samples))

    moved = first_order_update(ctx, dw, eps)
    oracle = minimal_change_counterfactual_oracle(ds, kernel, w + eps * dw, x_cf, t)
    step = float(np.linalg.norm(oracle - x_cf))
    relative = float(np.linalg.norm(moved - oracle) / step) if step > 0.0 else 0.0
    checks.append(_check("oracle", relative <= ORACLE_FACTOR * eps, relative_error=relative,
                         tolerance=ORACLE_FACTOR * eps, oracle_step=step))
    return checks


def check_degenerate(config: RunConfig) -> dict:
    """Zero weights: ``v = 0`` while ``k_X(x_cf) != 0``."""
    ds, kernel, w, x_cf, _, dw = rbf_problem(config.sensitivity.n, config.sensitivity.d,
                                             config.sensitivity.rbf_gamma, config.seed)
    ctx = build_context(ds, kernel, np.zeros_like(w), x_cf, 0.0)
    try:
        jacobian_action(ctx, dw)
    except NoSolutionError as exc:
        return {"name": "degenerate", "status": "no_solution", "degenerate": ctx.degenerate, "message": str(exc)}
    return _check("degenerate", False, degenerate=ctx.degenerate,
                  message="expected no solution for v = 0, u != 0")


def cmd_sensitivity(config: RunConfig) -> dict:
    """Run every check and write ``sensitivity.json``."""
    checks = [check_scalar(config.sensitivity.eps), *check_rbf(config), check_degenerate(config)]
    issues = [
        {"check": c["name"], "message": f"{c['name']} outside tolerance", "severity": "fail"}
        for c in checks if c["status"] == "fail"
    ]
    for c in checks:
        logger.info("%s: %s", c["name"], c["status"])

    report = {
        "checks": checks,
        "issues": issues,
        "summary": {
            "checks": len(checks),
            "passed": sum(1 for c in checks if c["status"] == "pass"),
            "failed": len(issues),
            "no_solution": sum(1 for c in checks if c["status"] == "no_solution"),
            "eps": config.sensitivity.eps,
        },
    }
    out_dir = Path(config.output.dir)
    report["reproducibility"] = record_run(
        out_dir, "sensitivity", config, report["summary"], [REPORT_NAME]
    )
    write_report(out_dir, REPORT_NAME, report)
    return report


if __name__ == "__main__":
    parser = build_parser("Validate the first-order counterfactual update under weight perturbations.")
    sys.exit(run_command(cmd_sensitivity, parser.parse_args()))
