"""Instability measures for prescribed recourses and their upper bounds.

Outcome instability is the score change at a fixed counterfactual;
action instability is the distance between the prescribed recourse and the
one recomputed on the updated model.  The bounds cover single deletions
from linear and NTK regression models.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

_fit_scripts = str(Path(__file__).resolve().parent.parent.parent / "fit" / "scripts")
if _fit_scripts not in sys.path:
    sys.path.insert(0, _fit_scripts)

from data import Dataset
from influence import MAX_LEVERAGE, LeverageError, loo_linear_all, ntk_dual_influences
from models import LinearModel, NtkModel, ntk_gram, predict_scores

logger = logging.getLogger(__name__)


class DiametricalChangeError(ValueError):
    """Raised when a deletion flips the weight vector to an obtuse angle (w'w_-i < 0)."""

    def __init__(self, message: str, indices: list[int]):
        super().__init__(message)
        self.indices = indices


@dataclass(frozen=True)
class PathBound:
    """Path-integral bound on an action change next to the measured change."""

    bound: float
    measured: float

    @property
    def holds(self) -> bool:
        return self.measured <= self.bound


@dataclass(eq=False)
class InstabilityReport:
    """Single-deletion instability of one test point's prescribed recourse."""

    point: int
    deleted_indices: list[int]
    outcome: np.ndarray
    invalidated: np.ndarray
    bound_outcome: Optional[float] = None
    action: Optional[np.ndarray] = None
    bound_action: Optional[float] = None
    notes: list[str] = field(default_factory=list)

    @property
    def outcome_bound_holds(self) -> Optional[bool]:
        if self.bound_outcome is None:
            return None
        return bool(np.all(self.outcome <= self.bound_outcome * (1.0 + 1e-9) + 1e-12))

    @property
    def action_bound_holds(self) -> Optional[bool]:
        if self.bound_action is None or self.action is None:
            return None
        return bool(np.all(self.action <= self.bound_action * (1.0 + 1e-9) + 1e-12))


def _score(f) -> Callable[[np.ndarray], float]:
    if callable(f):
        return f
    return lambda x: float(predict_scores(f, x)[0])


# ------------------------------------------------------------------
# Measures
# ------------------------------------------------------------------


def outcome_instability(f_old, f_new, x_cf) -> float:
    """``|f_old(x_cf) - f_new(x_cf)|``; models or plain score callables are accepted."""
    x_cf = np.asarray(x_cf, dtype=float).reshape(-1)
    return abs(float(_score(f_old)(x_cf)) - float(_score(f_new)(x_cf)))


def outcome_invalidation(f_new, x_cf, s: float) -> bool:
    """True iff ``f_new(x_cf) <= s``; a tie with the target invalidates."""
    x_cf = np.asarray(x_cf, dtype=float).reshape(-1)
    return bool(float(_score(f_new)(x_cf)) <= s)


def action_instability(delta_old, delta_new, p: float = 2.0) -> float:
    """``|delta_old - delta_new|_p`` for ``p >= 1`` (``np.inf`` allowed)."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    diff = np.asarray(delta_old, dtype=float).reshape(-1) - np.asarray(delta_new, dtype=float).reshape(-1)
    return float(np.linalg.norm(diff, ord=p))


# ------------------------------------------------------------------
# Bounds
# ------------------------------------------------------------------


def _linear_influences(ds: Dataset, m: LinearModel) -> np.ndarray:
    D, h, _ = loo_linear_all(ds, m.w)
    high = np.flatnonzero(h >= MAX_LEVERAGE)
    if high.size:
        raise LeverageError(
            f"Rows {high.tolist()} have leverage ~1; their deletion is rank-deficient"
        )
    return D


def bound_outcome_linear(ds: Dataset, m: LinearModel, x_cf) -> float:
    """``|x_cf|_2 * max_i |d_i|_2`` over all single deletions."""
    x_cf = np.asarray(x_cf, dtype=float).reshape(-1)
    D = _linear_influences(ds, m)
    return float(np.linalg.norm(x_cf) * np.max(np.linalg.norm(D, axis=1)))


def bound_outcome_ntk(ds: Dataset, m: NtkModel, x_cf, gram: np.ndarray | None = None) -> float:
    """``|K(x_cf, X)|_2 * max_i |d_i^NTK|_2`` over all single deletions."""
    x_cf = np.asarray(x_cf, dtype=float).reshape(-1)
    D = ntk_dual_influences(m, ds, gram)
    k = ntk_gram(x_cf[None, :], ds.X)[0]
    return float(np.linalg.norm(k) * np.max(np.linalg.norm(D, axis=0)))


def bound_action_linear(ds: Dataset, m: LinearModel, x) -> float:
    """Action bound for closed-form recourse toward ``s = 0`` under single deletions.

    ``max_i |d_i| * 4 sqrt(2) |x| / min(|w|, min_i |w_-i|)``.  Holds only
    while every deletion keeps ``w'w_-i >= 0``.

    Raises
    ------
    DiametricalChangeError
        Listing every index whose deletion gives ``w'w_-i < 0``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    D = _linear_influences(ds, m)
    W_minus = m.w[None, :] - D
    offending = np.flatnonzero(W_minus @ m.w < 0.0).tolist()
    if offending:
        raise DiametricalChangeError(
            f"Deleting rows {offending} reverses the weight direction (w'w_-i < 0)",
            offending,
        )
    spread = float(np.max(np.linalg.norm(D, axis=1)))
    x_norm = float(np.linalg.norm(x))
    if spread == 0.0 or x_norm == 0.0:
        return 0.0
    smallest = min(float(np.linalg.norm(m.w)), float(np.min(np.linalg.norm(W_minus, axis=1))))
    if smallest == 0.0:
        return float("inf")
    return spread * 4.0 * np.sqrt(2.0) * x_norm / smallest


def _fd_jacobian(delta_fn, w: np.ndarray, base_step: float) -> np.ndarray:
    columns = []
    for k in range(w.shape[0]):
        h = base_step * max(1.0, abs(w[k]))
        e = np.zeros_like(w)
        e[k] = h
        columns.append((np.asarray(delta_fn(w + e)) - np.asarray(delta_fn(w - e))) / (2.0 * h))
    return np.column_stack(columns)


def bound_action_path(
    delta_fn: Callable[[np.ndarray], np.ndarray],
    w_a,
    w_b,
    segments: int = 64,
    jacobian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    step: float = 1e-6,
) -> PathBound:
    """Integrate the recourse-map Jacobian norm along the segment from *w_b* to *w_a*.

    ``|w_a - w_b| * int_0^1 |D delta(g w_a + (1 - g) w_b)|_2 dg`` by the
    midpoint rule over *segments* pieces.  The Jacobian is taken by central
    finite differences unless *jacobian_fn* is supplied.  The measured change
    ``|delta(w_a) - delta(w_b)|`` is reported alongside.
    """
    if segments < 1:
        raise ValueError(f"segments must be >= 1, got {segments}")
    w_a = np.asarray(w_a, dtype=float).reshape(-1)
    w_b = np.asarray(w_b, dtype=float).reshape(-1)
    length = float(np.linalg.norm(w_a - w_b))
    measured = float(np.linalg.norm(np.asarray(delta_fn(w_a)) - np.asarray(delta_fn(w_b))))
    if length == 0.0:
        return PathBound(0.0, measured)

    norms = np.empty(segments)
    for j in range(segments):
        gamma = (j + 0.5) / segments
        point = gamma * w_a + (1.0 - gamma) * w_b
        J = jacobian_fn(point) if jacobian_fn is not None else _fd_jacobian(delta_fn, point, step)
        J = np.atleast_2d(np.asarray(J, dtype=float))
        if not np.all(np.isfinite(J)):
            raise ValueError(f"Non-finite recourse Jacobian at path position {gamma:.4f}")
        norms[j] = np.linalg.norm(J, 2)
    return PathBound(float(length * norms.mean()), measured)
