"""Monte-Carlo check of the closed-form NTK.

For unit vectors at angle ``a``, the closed form
``x'z (pi - a) / (2 pi)`` should equal ``x'z P(w'x >= 0, w'z >= 0)`` with
``w ~ N(0, I)``.  Writes ``ntk_check.json``.
"""

from __future__ import annotations

import logging
import math
import sys
from pathlib import Path

import numpy as np

_skills = Path(__file__).resolve().parent.parent.parent
for _scripts in (_skills / "fit" / "scripts", _skills / "recourse" / "scripts"):
    if str(_scripts) not in sys.path:
        sys.path.insert(0, str(_scripts))

from config import RunConfig
from history import record_run
from models import ntk_kernel
from pipeline import build_parser, run_command, write_report

logger = logging.getLogger(__name__)

REPORT_NAME = "ntk_check.json"
RELATIVE_TOLERANCE = 1e-2
# Applied where x'z vanishes and the relative error of the kernel is undefined.
ABSOLUTE_TOLERANCE = 1e-3
_ORTHOGONAL = 1e-12

_CHUNK = 250_000


def co_activation_rate(x, z, samples: int, rng: np.random.Generator) -> float:
    """Fraction of Gaussian directions with ``w'x >= 0`` and ``w'z >= 0``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    hits = 0
    remaining = samples
    while remaining > 0:
        size = min(_CHUNK, remaining)
        W = rng.standard_normal((size, x.shape[0]))
        hits += int(np.count_nonzero((W @ x >= 0.0) & (W @ z >= 0.0)))
        remaining -= size
    return hits / samples


def check_angle(angle_deg: float, samples: int, rng: np.random.Generator) -> dict:
    angle = math.radians(angle_deg)
    x = np.array([1.0, 0.0])
    z = np.array([math.cos(angle), math.sin(angle)])
    inner = float(x @ z)
    closed = ntk_kernel(x, z)
    rate = co_activation_rate(x, z, samples, rng)
    expected_rate = (math.pi - angle) / (2.0 * math.pi)
    return {
        "angle_deg": angle_deg,
        "inner": inner,
        "closed_form": closed,
        "monte_carlo": inner * rate,
        "rate": rate,
        "expected_rate": expected_rate,
        "relative_error": abs(rate - expected_rate) / expected_rate if expected_rate > 0.0 else rate,
        "absolute_error": abs(inner * rate - closed),
    }


def cmd_ntk_check(config: RunConfig) -> dict:
    """Compare the closed form with sampling on an even grid of angles."""
    section = config.ntk_check
    angles = np.linspace(0.0, section.max_angle_deg, section.angles)
    rows = [
        check_angle(float(a), section.samples, np.random.default_rng([config.seed, k]))
        for k, a in enumerate(angles)
    ]
    issues = []
    for row in rows:
        logger.info("angle %.1f: closed %.6f, sampled %.6f", row["angle_deg"], row["closed_form"], row["monte_carlo"])
        if row["relative_error"] > RELATIVE_TOLERANCE:
            issues.append({"angle_deg": row["angle_deg"], "severity": "fail",
                           "message": f"Relative error {row['relative_error']:.3e} exceeds {RELATIVE_TOLERANCE}"})
        if abs(row["inner"]) < _ORTHOGONAL and row["absolute_error"] > ABSOLUTE_TOLERANCE:
            issues.append({"angle_deg": row["angle_deg"], "severity": "fail",
                           "message": f"Absolute error {row['absolute_error']:.3e} exceeds {ABSOLUTE_TOLERANCE}"})

    report = {
        "angles": rows,
        "issues": issues,
        "summary": {
            "angles": len(rows),
            "samples": section.samples,
            "max_relative_error": max(r["relative_error"] for r in rows),
            "max_absolute_error": max(r["absolute_error"] for r in rows),
            "passed": not issues,
        },
    }
    out_dir = Path(config.output.dir)
    report["reproducibility"] = record_run(out_dir, "ntk_check", config, report["summary"], [REPORT_NAME])
    write_report(out_dir, REPORT_NAME, report)
    return report


if __name__ == "__main__":
    parser = build_parser("Check the closed-form NTK against Gaussian sampling.")
    sys.exit(run_command(cmd_ntk_check, parser.parse_args()))
