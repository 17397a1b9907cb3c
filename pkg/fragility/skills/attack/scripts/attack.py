"""Deletion attacks: find up to M training points whose removal destabilizes recourse.

Four searches share one objective over data weights ``omega``:

- ``greedy_attack``: remove the single best point per round, refit, repeat
- ``sgd_attack``: gradient ascent on Gaussian-relaxed gates, then binarize
- ``random_baseline``: uniform random removals, averaged over trials
- ``brute_force_attack``: exhaustive search over small removal sets

Every result is re-scored by exact refits (the ground truth).
"""

from __future__ import annotations

import itertools
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

_skills = Path(__file__).resolve().parent.parent.parent
for _scripts in (_skills / "fit" / "scripts", _skills / "recourse" / "scripts"):
    if str(_scripts) not in sys.path:
        sys.path.insert(0, str(_scripts))

from data import Dataset
from influence import apply_link, link_derivative, make_updater, refit_exact
from models import ConvergenceError, ModelSpec, SingularSystemError
from recourse import (
    PrescribedRecourses,
    build_action_cache,
    closed_form_action_jacobians,
    closed_form_actions,
)

logger = logging.getLogger(__name__)

METRICS = ("outcome_count", "action_sum")
ATTACK_METHODS = ("greedy", "sgd", "random", "brute")

# Upper limit on the number of removal sets brute force may enumerate.
MAX_BRUTE_FORCE_SUBSETS = 1_000_000


class AttackError(ValueError):
    """Raised for attack requests that cannot be carried out."""


# ------------------------------------------------------------------
# Types
# ------------------------------------------------------------------


@dataclass(frozen=True)
class SgdSettings:
    """Gate optimizer knobs: steps, Monte-Carlo samples K, gate noise sigma,
    removal penalty eta, learning rate lr and soft-invalidation temperature tau.

    ``pool_fraction`` sets how many of the lowest gates (as a share of the
    training points) each binarization round may choose from; 0 removes the
    M lowest gates directly.
    """

    steps: int = 100
    K: int = 4
    sigma: float = 0.5
    eta: float = 0.05
    lr: float = 0.5
    tau: float = 0.1
    pool_fraction: float = 0.25

    def __post_init__(self):
        if self.steps < 0:
            raise AttackError(f"sgd.steps must be >= 0, got {self.steps}")
        if self.K < 1:
            raise AttackError(f"sgd.K must be >= 1, got {self.K}")
        if self.sigma < 0 or self.eta < 0:
            raise AttackError("sgd.sigma and sgd.eta must be >= 0")
        if self.lr <= 0 or self.tau <= 0:
            raise AttackError("sgd.lr and sgd.tau must be > 0")
        if not 0.0 <= self.pool_fraction <= 1.0:
            raise AttackError(f"sgd.pool_fraction must lie in [0, 1], got {self.pool_fraction}")

    @property
    def mu_ceiling(self) -> float:
        """Gate means above this leave the gate open for every practical noise draw."""
        return 1.0 + 3.0 * self.sigma

    def pool_size(self, n: int) -> int:
        return max(1, math.ceil(self.pool_fraction * n)) if self.pool_fraction > 0 else 0


@dataclass(frozen=True)
class AttackConfig:
    M: int = 14
    metric: str = "outcome_count"
    model: ModelSpec = field(default_factory=ModelSpec)
    recourse_kind: str = "closed"
    lam: float = 1e-6
    p: float = 2.0
    seed: int = 0
    sgd: SgdSettings = field(default_factory=SgdSettings)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise AttackError(f"Unknown metric '{self.metric}'; expected one of {METRICS}")
        if self.M < 0:
            raise AttackError(f"M must be >= 0, got {self.M}")
        if self.metric == "action_sum" and self.recourse_kind != "closed":
            raise AttackError("The action metric needs closed-form recourse")
        if self.p < 1:
            raise AttackError(f"p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class CurvePoint:
    k: int
    metric_value: float
    invalidation_rate: float
    sd: Optional[float] = None


@dataclass(eq=False)
class AttackResult:
    """Removal order, surrogate curve and ground-truth curve of one attack run.

    ``curve`` holds the values the search itself saw; ``ground_truth_curve``
    re-scores the same prefixes of ``removed_indices`` by exact refits.
    """

    method: str
    removed_indices: list[int]
    curve: list[CurvePoint]
    weights: np.ndarray
    ground_truth: dict
    ground_truth_curve: list[CurvePoint] = field(default_factory=list)
    trial_curves: Optional[np.ndarray] = None
    gates: Optional[np.ndarray] = None
    excluded: int = 0


# ------------------------------------------------------------------
# Objective
# ------------------------------------------------------------------


class AttackObjective:
    """Instability of the valid prescribed recourses as a function of model parameters.

    Prescribed recourses that miss the target are excluded up front and
    counted in ``excluded``.
    """

    def __init__(self, updater, prescribed: PrescribedRecourses, cfg: AttackConfig):
        active = np.flatnonzero(prescribed.valid)
        if active.size == 0:
            raise AttackError("No valid prescribed recourse to attack")
        self.updater = updater
        self.cfg = cfg
        self.excluded = int(prescribed.q - active.size)
        self.q = int(active.size)
        self.s = prescribed.s
        self.threshold = prescribed.threshold
        self.features = updater.features(prescribed.counterfactuals[active])
        self.base_params = updater.exact(np.ones(updater.ds.n))
        self.base_scores = apply_link(updater, self.features @ self.base_params)
        self.cache = None
        self.base_actions = None
        if cfg.recourse_kind == "closed":
            model = updater.to_model(self.base_params)
            self.cache = build_action_cache(model, prescribed.factuals[active])
            self.base_actions = closed_form_actions(self.cache, self.base_params, self.s, cfg.lam)

    def scores(self, P: np.ndarray) -> np.ndarray:
        return apply_link(self.updater, self.features @ P)

    def invalidated(self, P: np.ndarray) -> np.ndarray:
        """Number of recourses at or below the threshold, per parameter column."""
        return np.sum(self.scores(P) <= self.threshold, axis=0)

    def action_sums(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P.T).T
        out = np.empty(P.shape[1])
        for c in range(P.shape[1]):
            moved = closed_form_actions(self.cache, P[:, c], self.s, self.cfg.lam)
            out[c] = np.sum(np.linalg.norm(self.base_actions - moved, ord=self.cfg.p, axis=1))
        return out

    def values(self, P: np.ndarray) -> np.ndarray:
        P = P.reshape(P.shape[0], -1)
        if self.cfg.metric == "action_sum":
            return self.action_sums(P)
        return self.invalidated(P).astype(float)

    def evaluate(self, params: np.ndarray) -> dict:
        """All measures for a single parameter vector."""
        scores = self.scores(params[:, None])[:, 0]
        count = int(np.sum(scores <= self.threshold))
        result = {
            "invalidated": count,
            "invalidation_rate": count / self.q,
            "outcome_sum": float(np.sum(np.abs(scores - self.base_scores))),
            "action_sum": None,
            "evaluated": self.q,
            "excluded": self.excluded,
        }
        if self.cache is not None:
            result["action_sum"] = float(self.action_sums(params[:, None])[0])
        result["metric_value"] = (
            result["action_sum"] if self.cfg.metric == "action_sum" else float(count)
        )
        return result


def _updater_for(ds: Dataset, cfg: AttackConfig, updater):
    return make_updater(ds, cfg.model) if updater is None else updater


def _check_budget(ds: Dataset, M: int) -> None:
    if M >= ds.n:
        raise AttackError(f"M={M} would delete every one of the {ds.n} training points")


def _weights_without(n: int, removed) -> np.ndarray:
    omega = np.ones(n)
    omega[list(removed)] = 0.0
    return omega


# ------------------------------------------------------------------
# Ground truth
# ------------------------------------------------------------------


def evaluate_ground_truth(
    ds: Dataset,
    omega,
    prescribed: PrescribedRecourses,
    cfg: AttackConfig,
    objective: Optional[AttackObjective] = None,
) -> dict:
    """Refit exactly under *omega* and re-score the prescribed recourses.

    Outcome measures use the original counterfactuals; the action measure
    recomputes closed-form recourses on the refit model.
    """
    objective = objective or AttackObjective(make_updater(ds, cfg.model), prescribed, cfg)
    model = refit_exact(ds, omega, cfg.model.kind, {"beta": cfg.model.beta, "l2": cfg.model.l2})
    return objective.evaluate(np.asarray(model.params, dtype=float))


def _ground_truth_curve(ds, removed, prescribed, cfg, objective) -> tuple[list[CurvePoint], dict]:
    curve = []
    final = None
    for k in range(len(removed) + 1):
        try:
            final = evaluate_ground_truth(ds, _weights_without(ds.n, removed[:k]), prescribed, cfg, objective)
        except (SingularSystemError, ConvergenceError) as exc:
            logger.warning("Ground-truth refit at k=%d failed: %s", k, exc)
            curve.append(CurvePoint(k, float("nan"), float("nan")))
            final = {"error": str(exc)}
            continue
        curve.append(CurvePoint(k, final["metric_value"], final["invalidation_rate"]))
    return curve, final


# ------------------------------------------------------------------
# Greedy
# ------------------------------------------------------------------


def greedy_attack(
    ds: Dataset,
    prescribed: PrescribedRecourses,
    cfg: AttackConfig,
    updater=None,
) -> AttackResult:
    """Remove, M times, the retained point whose deletion scores highest.

    Candidates are scored from the exact fit of the current round: closed
    forms for linear and NTK models, the jackknife for logistic ones.  Ties
    go to the lowest index.  The model is refit after every pick.

    Raises
    ------
    AttackError
        If M >= n or every remaining candidate leaves a singular refit.
    """
    _check_budget(ds, cfg.M)
    updater = _updater_for(ds, cfg, updater)
    objective = AttackObjective(updater, prescribed, cfg)

    omega = np.ones(ds.n)
    params = objective.base_params
    curve = [CurvePoint(0, float(objective.values(params)[0]),
                        float(objective.invalidated(params[:, None])[0] / objective.q))]
    removed: list[int] = []
    for k in range(1, cfg.M + 1):
        P, feasible = updater.deletion_candidates(omega, params)
        values = objective.values(P)
        values[~feasible] = -np.inf
        if not np.any(np.isfinite(values)):
            raise AttackError(f"Round {k}: every remaining deletion leaves a singular refit")
        pick = int(np.argmax(values))
        removed.append(pick)
        rate = float(objective.invalidated(P[:, pick:pick + 1])[0] / objective.q)
        curve.append(CurvePoint(k, float(values[pick]), rate))
        logger.info("Greedy round %d removes row %d (metric %.6g)", k, pick, values[pick])
        omega[pick] = 0.0
        params = updater.exact(omega)

    gt_curve, final = _ground_truth_curve(ds, removed, prescribed, cfg, objective)
    return AttackResult("greedy", removed, curve, omega, final, gt_curve, excluded=objective.excluded)


# ------------------------------------------------------------------
# Stochastic gates
# ------------------------------------------------------------------


def _gate_noise(seed: int, step: int, sample: int, n: int, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return np.zeros(n)
    return np.random.default_rng([seed, step, sample]).normal(0.0, sigma, size=n)


def _soft_objective_gradient(objective: AttackObjective, omega: np.ndarray, tau: float):
    """Soft objective at relaxed weights *omega* and its gradient with respect to omega."""
    updater = objective.updater
    theta = updater.surrogate(omega)
    dtheta = updater.jacobian(omega)  # p x n
    if objective.cfg.metric == "action_sum":
        moved = closed_form_actions(objective.cache, theta, objective.s, objective.cfg.lam)
        diff = moved - objective.base_actions
        lengths = np.linalg.norm(diff, axis=1)
        value = float(np.mean(lengths))
        jac = closed_form_action_jacobians(objective.cache, theta, objective.s, objective.cfg.lam)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(lengths[:, None] > 0.0, diff / lengths[:, None], 0.0)
        grad_theta = np.einsum("qd,qdp->p", unit, jac) / objective.q
        return value, dtheta.T @ grad_theta

    raw = objective.features @ theta
    scores = apply_link(updater, raw)
    soft = expit((objective.threshold - scores) / tau)
    value = float(np.mean(soft))
    dsoft = -soft * (1.0 - soft) / tau * link_derivative(updater, raw)
    grad_theta = objective.features.T @ dsoft / objective.q
    return value, dtheta.T @ grad_theta


def _binarize(objective: AttackObjective, mu: np.ndarray, M: int, pool: int) -> list[int]:
    """Removal order from the gate means; see :func:`sgd_attack`."""
    order = np.argsort(mu, kind="stable")
    if pool == 0:
        return [int(i) for i in order[:M]]

    updater = objective.updater
    omega = np.ones(mu.shape[0])
    params = objective.base_params
    removed: list[int] = []
    for k in range(1, M + 1):
        candidates = order[omega[order] > 0][:pool]
        P, feasible = updater.deletion_candidates(omega, params)
        values = objective.values(P[:, candidates])
        values[~feasible[candidates]] = -np.inf
        if not np.any(np.isfinite(values)):
            raise AttackError(f"Binarization round {k}: every pooled deletion leaves a singular refit")
        pick = int(candidates[int(np.argmax(values))])
        removed.append(pick)
        omega[pick] = 0.0
        params = updater.exact(omega)
    return removed


def sgd_attack(
    ds: Dataset,
    prescribed: PrescribedRecourses,
    cfg: AttackConfig,
    updater=None,
) -> AttackResult:
    """Gradient ascent on the mean soft invalidation over relaxed gates.

    Gates are ``clip(mu + eps, 0, 1)`` with ``eps ~ N(0, sigma^2)`` drawn from a
    generator seeded by ``(seed, step, sample)``.  The ascent maximizes the
    Monte-Carlo mean of the soft objective minus
    ``eta * sum_i Phi((1 - mu_i) / sigma)``.  ``mu`` starts at 1 and is capped
    at ``1 + 3 sigma``; there is no lower cap.

    Binarization then removes M points in rounds.  Each round looks at the
    retained points with the smallest ``mu`` (``sgd.pool_fraction`` of the
    training set, stable ascending order), scores each deletion with the
    updater's candidate map and removes the best, ties going to the smaller
    ``mu``; the model is refit exactly between rounds.  With
    ``pool_fraction = 0`` the M smallest ``mu`` are removed as they are.

    Raises
    ------
    ConvergenceError
        If the gradient becomes non-finite.
    AttackError
        If a binarization round finds only singular deletions.
    """
    _check_budget(ds, cfg.M)
    settings = cfg.sgd
    updater = _updater_for(ds, cfg, updater)
    objective = AttackObjective(updater, prescribed, cfg)
    n = ds.n
    mu = np.ones(n)

    for step in range(settings.steps):
        grad = np.zeros(n)
        total = 0.0
        used = 0
        for sample in range(settings.K):
            raw_gates = mu + _gate_noise(cfg.seed, step, sample, n, settings.sigma)
            gates = np.clip(raw_gates, 0.0, 1.0)
            if not np.any(gates > 0.0):
                continue
            try:
                value, g = _soft_objective_gradient(objective, gates, settings.tau)
            except (SingularSystemError, np.linalg.LinAlgError) as exc:
                logger.info("Step %d sample %d skipped: %s", step, sample, exc)
                continue
            inside = (raw_gates >= 0.0) & (raw_gates <= 1.0)
            grad += np.where(inside, g, 0.0)
            total += value
            used += 1
        if used:
            grad /= used
            total /= used
        if settings.sigma > 0.0:
            z = (1.0 - mu) / settings.sigma
            penalty = settings.eta * float(np.sum(norm.cdf(z)))
            grad += settings.eta * norm.pdf(z) / settings.sigma
        else:
            penalty = settings.eta * float(np.sum(mu < 1.0))
        if not np.all(np.isfinite(grad)):
            raise ConvergenceError(f"Gate gradient became non-finite at step {step}")
        mu = np.minimum(mu + settings.lr * grad, settings.mu_ceiling)
        if step % 10 == 0:
            logger.info("SGD step %d: soft objective %.6g, penalty %.6g", step, total, penalty)

    removed = _binarize(objective, mu, cfg.M, settings.pool_size(n))
    omega = _weights_without(n, removed)

    curve = []
    for k in range(cfg.M + 1):
        theta = updater.surrogate(_weights_without(n, removed[:k]))
        curve.append(CurvePoint(k, float(objective.values(theta)[0]),
                                float(objective.invalidated(theta[:, None])[0] / objective.q)))
    gt_curve, final = _ground_truth_curve(ds, removed, prescribed, cfg, objective)
    return AttackResult("sgd", removed, curve, omega, final, gt_curve, gates=mu,
                        excluded=objective.excluded)


# ------------------------------------------------------------------
# Random baseline
# ------------------------------------------------------------------


def random_baseline(
    ds: Dataset,
    prescribed: PrescribedRecourses,
    cfg: AttackConfig,
    trials: int = 20,
    updater=None,
) -> AttackResult:
    """Delete uniformly random points; mean and sd of the exact measures per k.

    Trial ``t`` draws one permutation from a generator seeded by
    ``(seed, t)`` and removes its first ``k`` entries, so every removal set is
    a uniform sample without replacement.  ``trial_curves`` has shape
    (trials, M + 1, 2) holding invalidation rate and metric value; refits
    that fail are NaN and left out of the mean.
    """
    if trials < 1:
        raise AttackError(f"trials must be >= 1, got {trials}")
    _check_budget(ds, cfg.M)
    updater = _updater_for(ds, cfg, updater)
    objective = AttackObjective(updater, prescribed, cfg)
    n = ds.n

    table = np.full((trials, cfg.M + 1, 2), np.nan)
    for t in range(trials):
        order = np.random.default_rng([cfg.seed, t]).permutation(n)
        for k in range(cfg.M + 1):
            try:
                measures = objective.evaluate(updater.exact(_weights_without(n, order[:k])))
            except (SingularSystemError, ConvergenceError) as exc:
                logger.info("Random trial %d, k=%d skipped: %s", t, k, exc)
                continue
            table[t, k] = (measures["invalidation_rate"], measures["metric_value"])

    with np.errstate(invalid="ignore"):
        mean = np.nanmean(table, axis=0)
        sd = np.nanstd(table, axis=0)
    curve = [CurvePoint(k, float(mean[k, 1]), float(mean[k, 0]), float(sd[k, 0]))
             for k in range(cfg.M + 1)]
    ground_truth = {
        "invalidation_rate": float(mean[-1, 0]),
        "invalidation_rate_sd": float(sd[-1, 0]),
        "metric_value": float(mean[-1, 1]),
        "trials": trials,
        "excluded": objective.excluded,
    }
    return AttackResult("random", [], curve, np.ones(n), ground_truth, list(curve),
                        trial_curves=table, excluded=objective.excluded)


# ------------------------------------------------------------------
# Brute force
# ------------------------------------------------------------------


def brute_force_attack(
    ds: Dataset,
    prescribed: PrescribedRecourses,
    cfg: AttackConfig,
    k: int,
    updater=None,
) -> AttackResult:
    """Exhaustively score every removal set of size <= *k* by exact refits.

    Sets are enumerated in lexicographic order and only a strictly better
    value replaces the incumbent, so ties resolve to the lexicographically
    smallest set.  ``curve[j]`` is the optimum over sets of size exactly j.

    Raises
    ------
    AttackError
        If more than 10^6 sets would be enumerated.
    """
    if k < 0:
        raise AttackError(f"k must be >= 0, got {k}")
    _check_budget(ds, k)
    total = sum(math.comb(ds.n, j) for j in range(k + 1))
    if total > MAX_BRUTE_FORCE_SUBSETS:
        raise AttackError(
            f"Brute force over n={ds.n}, k={k} needs {total} refits "
            f"(limit {MAX_BRUTE_FORCE_SUBSETS})"
        )
    updater = _updater_for(ds, cfg, updater)
    objective = AttackObjective(updater, prescribed, cfg)

    curve = []
    best_sets: dict[int, list[int]] = {}
    for size in range(k + 1):
        best_value, best_set, best_rate = -np.inf, None, float("nan")
        for subset in itertools.combinations(range(ds.n), size):
            try:
                params = updater.exact(_weights_without(ds.n, subset))
            except (SingularSystemError, ConvergenceError):
                continue
            value = float(objective.values(params)[0])
            if value > best_value:
                best_value, best_set = value, list(subset)
                best_rate = float(objective.invalidated(params[:, None])[0] / objective.q)
        if best_set is None:
            raise AttackError(f"Every removal set of size {size} leaves a singular refit")
        best_sets[size] = best_set
        curve.append(CurvePoint(size, best_value, best_rate))

    removed = best_sets[k]
    omega = _weights_without(ds.n, removed)
    final = evaluate_ground_truth(ds, omega, prescribed, cfg, objective)
    final["best_sets"] = {str(j): s for j, s in best_sets.items()}
    return AttackResult("brute", removed, curve, omega, final, list(curve), excluded=objective.excluded)


def run_method(method: str, ds: Dataset, prescribed: PrescribedRecourses, cfg: AttackConfig,
               trials: int = 20, updater=None) -> AttackResult:
    """Dispatch on the attack method name; brute force searches up to ``cfg.M`` removals."""
    if method == "greedy":
        return greedy_attack(ds, prescribed, cfg, updater)
    if method == "sgd":
        return sgd_attack(ds, prescribed, cfg, updater)
    if method == "random":
        return random_baseline(ds, prescribed, cfg, trials, updater)
    if method == "brute":
        return brute_force_attack(ds, prescribed, cfg, cfg.M, updater)
    raise AttackError(f"Unknown attack method '{method}'; expected one of {ATTACK_METHODS}")
