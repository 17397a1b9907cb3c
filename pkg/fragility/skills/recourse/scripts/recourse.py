"""Recourse generation: actions ``delta`` moving a factual ``x`` to ``x + delta``.

The objective is ``(f(x + delta) - s)^2 + lam * |delta|^2`` over unconstrained
``delta``.  Linear, NTK and logistic models have a closed-form step along the
(local) input gradient; any differentiable score function can use the
gradient-descent generator instead.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import logit

# data.py and models.py live in fit/scripts/; add it to sys.path for cross-skill import.
_fit_scripts = str(Path(__file__).resolve().parent.parent.parent / "fit" / "scripts")
if _fit_scripts not in sys.path:
    sys.path.insert(0, _fit_scripts)

from models import (
    ConvergenceError,
    LinearModel,
    LogisticModel,
    NtkModel,
    ntk_gram,
    ntk_gram_input_gradient,
    ntk_input_gradient,
    predict_linear,
    predict_logistic,
    predict_ntk,
    predict_scores,
)

logger = logging.getLogger(__name__)

RECOURSE_KINDS = ("closed", "gradient")

# Relative slack below the threshold that still counts as reaching it.
FEASIBILITY_TOL = 1e-12

# Maximum number of times an overshooting NTK step is halved.
MAX_STEP_HALVINGS = 30


class UnreachableScoreError(ValueError):
    """Raised when the target score cannot be approached (zero gradient, lam = 0)."""


# ------------------------------------------------------------------
# Types
# ------------------------------------------------------------------


@dataclass(frozen=True)
class RecourseConfig:
    """Target score and generator knobs.

    ``validity_margin`` relaxes the validity test to ``score >= s - margin``.
    The threshold sits a further ``1e-12 * max(1, |s|)`` lower so that
    iterates converging onto ``s`` from below are not lost to rounding.
    """

    s: float
    lam: float = 1e-6
    max_iters: int = 1000
    step_size: float = 0.05
    validity_margin: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.s):
            raise ValueError(f"Target score must be finite, got {self.s}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.validity_margin < 0:
            raise ValueError(f"validity_margin must be >= 0, got {self.validity_margin}")

    @property
    def threshold(self) -> float:
        return self.s - self.validity_margin - FEASIBILITY_TOL * max(1.0, abs(self.s))


@dataclass(frozen=True, eq=False)
class RecourseResult:
    x: np.ndarray
    delta: np.ndarray
    x_cf: np.ndarray
    achieved_score: float
    valid: bool
    method: str
    iterations: int = 0


@dataclass(frozen=True)
class ScoreFunction:
    """A score ``value(x)`` together with its input gradient ``gradient(x)``."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ActionCache:
    """Per-factual quantities that make closed-form recourse linear in the parameters.

    Raw scores are ``features[j] @ theta`` and input gradients are
    ``input_jacobians[j] @ theta``.  ``link`` is ``"logistic"`` when the
    reported score is ``sigmoid`` of the raw score.
    """

    factuals: np.ndarray
    features: np.ndarray
    input_jacobians: np.ndarray
    link: str = "identity"

    def raw_target(self, s: float) -> float:
        if self.link == "logistic":
            if not 0.0 < s < 1.0:
                raise UnreachableScoreError(
                    f"Probability target {s} lies outside (0, 1)"
                )
            return float(logit(s))
        return float(s)


@dataclass(frozen=True, eq=False)
class PrescribedRecourses:
    """Recourses handed out under the full-data model for a batch of factuals."""

    factuals: np.ndarray
    actions: np.ndarray
    counterfactuals: np.ndarray
    scores: np.ndarray
    valid: np.ndarray
    s: float
    threshold: float
    method: str

    @property
    def q(self) -> int:
        return self.factuals.shape[0]


# ------------------------------------------------------------------
# Closed forms
# ------------------------------------------------------------------


def _closed_step(gap: float, direction: np.ndarray, lam: float) -> np.ndarray:
    norm2 = float(direction @ direction)
    if norm2 == 0.0 and lam == 0.0:
        raise UnreachableScoreError(
            "Input gradient vanishes and lam = 0; the target score is unreachable"
        )
    if gap == 0.0 or norm2 == 0.0:
        return np.zeros_like(direction)
    return (gap / (lam + norm2)) * direction


def _result(x, delta, score, cfg: RecourseConfig, method: str, iterations: int = 0) -> RecourseResult:
    return RecourseResult(
        x.copy(), delta, x + delta, float(score), bool(score >= cfg.threshold), method, iterations
    )


def scfe_linear(m: LinearModel, x, cfg: RecourseConfig) -> RecourseResult:
    """``delta = (s - w'x) / (lam + |w|^2) * w``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    delta = _closed_step(cfg.s - predict_linear(m, x), m.w, cfg.lam)
    return _result(x, delta, predict_linear(m, x + delta), cfg, "closed_linear")


def scfe_ntk(m: NtkModel, x, cfg: RecourseConfig) -> RecourseResult:
    """Linear-model step along the NTK input gradient at ``x``.

    ``achieved_score`` is the exact prediction at ``x + delta``, not the
    first-order estimate.  A step that lands further from ``s`` than ``x``
    itself is halved (at most 30 times) until it does not; if none of the
    halved steps qualifies the action is zero.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    start = predict_ntk(m, x)
    gap = cfg.s - start
    if gap == 0.0:
        return _result(x, np.zeros_like(x), start, cfg, "closed_ntk")
    step = _closed_step(gap, ntk_input_gradient(m, x), cfg.lam)
    for halving in range(MAX_STEP_HALVINGS + 1):
        delta = step * 0.5 ** halving
        score = predict_ntk(m, x + delta)
        if abs(score - cfg.s) <= abs(gap):
            if halving:
                logger.debug("NTK step halved %d times to avoid overshooting s", halving)
            return _result(x, delta, score, cfg, "closed_ntk")
    logger.debug("Every halved NTK step overshoots s; returning the zero action")
    return _result(x, np.zeros_like(x), start, cfg, "closed_ntk")


def scfe_logistic(m: LogisticModel, x, cfg: RecourseConfig) -> RecourseResult:
    """Linear step on the logit toward ``logit(s)``; requires ``0 < s < 1``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not 0.0 < cfg.s < 1.0:
        raise UnreachableScoreError(f"Probability target {cfg.s} lies outside (0, 1)")
    delta = _closed_step(float(logit(cfg.s)) - float(m.w @ x), m.w, cfg.lam)
    return _result(x, delta, predict_logistic(m, x + delta), cfg, "closed_logistic")


def closed_form_recourse(model, x, cfg: RecourseConfig) -> RecourseResult:
    if isinstance(model, LinearModel):
        return scfe_linear(model, x, cfg)
    if isinstance(model, NtkModel):
        return scfe_ntk(model, x, cfg)
    if isinstance(model, LogisticModel):
        return scfe_logistic(model, x, cfg)
    raise TypeError(f"No closed-form recourse for {type(model).__name__}")


# ------------------------------------------------------------------
# Gradient descent
# ------------------------------------------------------------------


def finite_difference_score(value: Callable[[np.ndarray], float], h: float = 1e-6) -> ScoreFunction:
    """Wrap a plain score function with a central finite-difference gradient."""

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        grad = np.empty_like(x)
        for j in range(x.shape[0]):
            e = np.zeros_like(x)
            e[j] = h
            grad[j] = (value(x + e) - value(x - e)) / (2.0 * h)
        return grad

    return ScoreFunction(value, gradient)


def score_function(model) -> ScoreFunction:
    """Analytic :class:`ScoreFunction` for a fitted model."""
    if isinstance(model, LinearModel):
        return ScoreFunction(lambda x: predict_linear(model, x), lambda x: model.w.copy())
    if isinstance(model, NtkModel):
        return ScoreFunction(lambda x: predict_ntk(model, x), lambda x: ntk_input_gradient(model, x))
    if isinstance(model, LogisticModel):
        def gradient(x):
            p = predict_logistic(model, x)
            return p * (1.0 - p) * model.w
        return ScoreFunction(lambda x: predict_logistic(model, x), gradient)
    raise TypeError(f"No score function for {type(model).__name__}")


def scfe_gradient(predict: ScoreFunction, x, cfg: RecourseConfig) -> RecourseResult:
    """Gradient descent on ``(f(x + delta) - s)^2 + lam |delta|^2`` from ``delta = 0``.

    Stops at the first iterate whose score reaches ``cfg.threshold``.  With
    ``lam = 0`` on a linear score the iterates approach ``s`` geometrically
    from below; the threshold's ``1e-12`` relative slack lets them stop once
    the remaining gap is at rounding level.  Otherwise returns the iterate
    with the lowest objective after ``max_iters`` steps, flagged invalid.

    Raises
    ------
    ConvergenceError
        If the objective or its gradient becomes non-finite.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    delta = np.zeros_like(x)
    best_delta, best_objective, best_score = delta, np.inf, np.nan

    for iteration in range(cfg.max_iters + 1):
        point = x + delta
        score = float(predict.value(point))
        objective = (score - cfg.s) ** 2 + cfg.lam * float(delta @ delta)
        if not np.isfinite(objective):
            raise ConvergenceError(
                f"Recourse objective became non-finite at iteration {iteration}; "
                f"step_size {cfg.step_size} is too large"
            )
        if score >= cfg.threshold:
            return _result(x, delta, score, cfg, "gradient", iteration)
        if objective < best_objective:
            best_delta, best_objective, best_score = delta, objective, score
        if iteration == cfg.max_iters:
            break
        grad = 2.0 * (score - cfg.s) * np.asarray(predict.gradient(point), dtype=float)
        grad = grad + 2.0 * cfg.lam * delta
        if not np.all(np.isfinite(grad)):
            raise ConvergenceError(f"Recourse gradient became non-finite at iteration {iteration}")
        delta = delta - cfg.step_size * grad

    logger.debug("No feasible recourse within %d iterations (best score %.6g)", cfg.max_iters, best_score)
    return RecourseResult(x.copy(), best_delta, x + best_delta, best_score, False, "gradient", cfg.max_iters)


# ------------------------------------------------------------------
# Batch closed forms, linear in the model parameters
# ------------------------------------------------------------------


def build_action_cache(model, X) -> ActionCache:
    """Precompute features and input Jacobians of the factuals in *X* for *model*'s family."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(model, NtkModel):
        features = ntk_gram(X, model.X_train)
        jacobians = np.stack([ntk_gram_input_gradient(x, model.X_train) for x in X])
        return ActionCache(X, features, jacobians)
    if isinstance(model, (LinearModel, LogisticModel)):
        d = X.shape[1]
        jacobians = np.broadcast_to(np.eye(d), (X.shape[0], d, d))
        link = "logistic" if isinstance(model, LogisticModel) else "identity"
        return ActionCache(X, X.copy(), jacobians, link)
    raise TypeError(f"No closed-form recourse for {type(model).__name__}")


def _gaps_and_gradients(cache: ActionCache, theta: np.ndarray, s: float, lam: float):
    target = cache.raw_target(s)
    gaps = target - cache.features @ theta
    grads = cache.input_jacobians @ theta
    norms = lam + np.einsum("ij,ij->i", grads, grads)
    if lam == 0.0 and np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise UnreachableScoreError(
            f"Input gradient vanishes with lam = 0 at factual rows {bad}"
        )
    return gaps, grads, norms


def closed_form_actions(cache: ActionCache, theta, s: float, lam: float) -> np.ndarray:
    """Closed-form actions (q x d) of every cached factual under parameters *theta*."""
    theta = np.asarray(theta, dtype=float)
    gaps, grads, norms = _gaps_and_gradients(cache, theta, s, lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(norms > 0.0, gaps / norms, 0.0)
    return coef[:, None] * grads


def closed_form_action_jacobians(cache: ActionCache, theta, s: float, lam: float) -> np.ndarray:
    """``d delta_j / d theta`` for every cached factual, shape (q, d, p).

    With ``g = G theta``, ``N = lam + |g|^2`` and ``c = (t - k'theta) / N``:
    ``J = c G - g k' / N - 2 c g (G'g)' / N``.
    """
    theta = np.asarray(theta, dtype=float)
    gaps, grads, norms = _gaps_and_gradients(cache, theta, s, lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(norms > 0.0, 1.0 / norms, 0.0)
    coef = gaps * inv
    G = cache.input_jacobians
    Gtg = np.einsum("qdp,qd->qp", G, grads)
    return (
        coef[:, None, None] * G
        - inv[:, None, None] * grads[:, :, None] * cache.features[:, None, :]
        - (2.0 * coef * inv)[:, None, None] * grads[:, :, None] * Gtg[:, None, :]
    )


# ------------------------------------------------------------------
# Prescriptions
# ------------------------------------------------------------------


def prescribe_recourses(model, X, cfg: RecourseConfig, kind: str = "closed") -> PrescribedRecourses:
    """Recourse for every row of *X* under the full-data *model*."""
    if kind not in RECOURSE_KINDS:
        raise ValueError(f"Unknown recourse kind '{kind}'; expected one of {RECOURSE_KINDS}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if kind == "closed":
        cache = build_action_cache(model, X)
        actions = closed_form_actions(cache, model.params, cfg.s, cfg.lam)
        method = "closed_" + {LinearModel: "linear", NtkModel: "ntk", LogisticModel: "logistic"}[type(model)]
    else:
        fn = score_function(model)
        actions = np.stack([scfe_gradient(fn, x, cfg).delta for x in X])
        method = "gradient"
    counterfactuals = X + actions
    scores = predict_scores(model, counterfactuals)
    valid = scores >= cfg.threshold
    if not np.all(valid):
        logger.info("%d of %d prescribed recourses miss the target", int(np.sum(~valid)), X.shape[0])
    return PrescribedRecourses(
        X.copy(), actions, counterfactuals, scores, valid, float(cfg.s), cfg.threshold, method
    )


def make_recourse_config(s: float, section: Optional[object] = None) -> RecourseConfig:
    """Build a :class:`RecourseConfig` from the ``recourse`` section of a run config."""
    if section is None:
        return RecourseConfig(s)
    return RecourseConfig(
        s,
        lam=section.lam,
        max_iters=section.iters,
        step_size=section.step_size,
        validity_margin=section.validity_margin,
    )
