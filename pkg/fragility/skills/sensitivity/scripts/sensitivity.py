"""First-order movement of a kernel-ridge counterfactual under a weight perturbation.

A counterfactual ``x_cf`` sits at score ``t`` for dual weights ``w``:
``k_X(x_cf)'w = t``.  When ``w`` moves to ``w + eps * dw``, the smallest input
change that keeps the score at ``t`` is, to first order,
``eps * v (u'dw) / |v|^2`` with ``v = J_kX' w`` and ``u = -k_X(x_cf)``.

A penalty-method oracle that solves the constrained nearest-point problem
directly is included for validating the linearization.
"""

from __future__ import annotations

import logging
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import optimize

_fit_scripts = str(Path(__file__).resolve().parent.parent.parent / "fit" / "scripts")
if _fit_scripts not in sys.path:
    sys.path.insert(0, _fit_scripts)

from data import Dataset
from models import ConvergenceError, ntk_gram, ntk_gram_input_gradient, solve_spd

logger = logging.getLogger(__name__)

KERNEL_NAMES = ("linear", "rbf", "ntk", "custom")

# Penalty weights tried in turn before the KKT polish.
_PENALTIES = (1.0, 1e2, 1e4, 1e6)


class ConstraintViolationError(ValueError):
    """Raised when a point does not sit at the target score."""


class NoSolutionError(ValueError):
    """Raised when ``v = 0`` but ``u != 0``: no input change can restore the score."""


class NormalizationWarning(UserWarning):
    """Issued when a perturbation direction is not unit length and gets normalized."""


# ------------------------------------------------------------------
# Kernels
# ------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """A differentiable kernel: feature map ``k_X(x)`` and its Jacobian (n x d).

    Custom kernels supply ``fn(x, X) -> k_X(x)``; their Jacobian is taken by
    central finite differences.
    """

    name: str = "rbf"
    gamma: float = 1.0
    fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.name not in KERNEL_NAMES:
            raise ValueError(f"Unknown kernel '{self.name}'; expected one of {KERNEL_NAMES}")
        if self.name == "custom" and self.fn is None:
            raise ValueError("A custom kernel needs a feature function")
        if self.name == "rbf" and self.gamma <= 0:
            raise ValueError(f"RBF gamma must be > 0, got {self.gamma}")

    def features(self, x, X) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.name == "linear":
            return X @ x
        if self.name == "rbf":
            return np.exp(-self.gamma * np.sum((X - x) ** 2, axis=1))
        if self.name == "ntk":
            return ntk_gram(x[None, :], X)[0]
        return np.asarray(self.fn(x, X), dtype=float).reshape(-1)

    def jacobian(self, x, X) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.name == "linear":
            return X.copy()
        if self.name == "rbf":
            k = self.features(x, X)
            return -2.0 * self.gamma * (x[None, :] - X) * k[:, None]
        if self.name == "ntk":
            return ntk_gram_input_gradient(x, X).T
        columns = []
        for j in range(x.shape[0]):
            e = np.zeros_like(x)
            e[j] = self.fd_step
            columns.append((self.features(x + e, X) - self.features(x - e, X)) / (2.0 * self.fd_step))
        return np.column_stack(columns)

    def gram(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.name == "ntk":
            return ntk_gram(X)
        return np.stack([self.features(x, X) for x in X])


def fit_kernel_ridge(ds: Dataset, kernel: KernelSpec, beta: float) -> np.ndarray:
    """Dual weights ``(K + beta I)^-1 y``."""
    if beta <= 0:
        raise ValueError(f"Ridge parameter beta must be > 0, got {beta}")
    K = kernel.gram(ds.X)
    return solve_spd(K + beta * np.eye(ds.n), ds.y, "regularized kernel matrix")


def _design(ds) -> np.ndarray:
    return ds.X if isinstance(ds, Dataset) else np.atleast_2d(np.asarray(ds, dtype=float))


# ------------------------------------------------------------------
# Context and first-order update
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KernelCounterfactualContext:
    x_cf: np.ndarray
    w: np.ndarray
    t: float
    kernel: KernelSpec
    X: np.ndarray
    J_kX: np.ndarray
    v: np.ndarray
    u: np.ndarray

    @property
    def degenerate(self) -> bool:
        """True when ``v = 0``, i.e. the weights have no input-space direction."""
        return not np.any(self.v)

    def score(self, x=None, w=None) -> float:
        x = self.x_cf if x is None else x
        w = self.w if w is None else w
        return float(self.kernel.features(x, self.X) @ w)


def build_context(ds, kernel: KernelSpec, w, x_cf, t: float, tol: float = 1e-6) -> KernelCounterfactualContext:
    """Evaluate ``J_kX``, ``v = J_kX' w`` and ``u = -k_X(x_cf)`` at a counterfactual.

    Raises
    ------
    ConstraintViolationError
        If ``|k_X(x_cf)'w - t| > tol``.
    """
    X = _design(ds)
    w = np.asarray(w, dtype=float).reshape(-1)
    x_cf = np.asarray(x_cf, dtype=float).reshape(-1)
    if w.shape[0] != X.shape[0]:
        raise ValueError(f"Dual weights have length {w.shape[0]}, expected {X.shape[0]}")
    k = kernel.features(x_cf, X)
    gap = float(k @ w) - t
    if abs(gap) > tol:
        raise ConstraintViolationError(
            f"Counterfactual scores {t + gap:.12g}, not the target {t:.12g} (gap {gap:.3e})"
        )
    J = kernel.jacobian(x_cf, X)
    v = J.T @ w
    if not np.any(v):
        logger.info("Degenerate context: v = 0 at the counterfactual")
    return KernelCounterfactualContext(x_cf.copy(), w.copy(), float(t), kernel, X, J, v, -k)


def jacobian_action(ctx: KernelCounterfactualContext, dw) -> np.ndarray:
    """Minimal-norm counterfactual velocity ``v (u'dw) / |v|^2`` for direction *dw*.

    With ``v = 0`` the answer is the zero vector when ``u = 0``.

    Raises
    ------
    NoSolutionError
        If ``v = 0`` while ``u != 0``.
    """
    dw = np.asarray(dw, dtype=float).reshape(-1)
    if dw.shape[0] != ctx.w.shape[0]:
        raise ValueError(f"Direction has length {dw.shape[0]}, expected {ctx.w.shape[0]}")
    if ctx.degenerate:
        if np.any(ctx.u):
            raise NoSolutionError(
                "v = 0 but k_X(x_cf) != 0: the weights are not represented in input space"
            )
        return np.zeros_like(ctx.v)
    return ctx.v * (float(ctx.u @ dw) / float(ctx.v @ ctx.v))


def minimal_jacobian(ctx: KernelCounterfactualContext) -> np.ndarray:
    """The full minimal Jacobian ``v u' / |v|^2`` (d x n)."""
    if ctx.degenerate:
        if np.any(ctx.u):
            raise NoSolutionError("v = 0 but k_X(x_cf) != 0")
        return np.zeros((ctx.v.shape[0], ctx.u.shape[0]))
    return np.outer(ctx.v, ctx.u) / float(ctx.v @ ctx.v)


def first_order_update(ctx: KernelCounterfactualContext, dw, eps: float) -> np.ndarray:
    """``x_cf + eps * jacobian_action(ctx, dw)``; *dw* is normalized if needed."""
    if not 0.0 <= abs(eps) <= 0.1:
        raise ValueError(f"eps must satisfy |eps| <= 0.1, got {eps}")
    dw = np.asarray(dw, dtype=float).reshape(-1)
    length = float(np.linalg.norm(dw))
    if length == 0.0:
        raise ValueError("Perturbation direction is the zero vector")
    if abs(length - 1.0) > 1e-12:
        warnings.warn(f"Direction has norm {length:.6g}; normalizing", NormalizationWarning, stacklevel=2)
        dw = dw / length
    return ctx.x_cf + eps * jacobian_action(ctx, dw)


# ------------------------------------------------------------------
# Oracle
# ------------------------------------------------------------------


def minimal_change_counterfactual_oracle(
    ds,
    kernel: KernelSpec,
    w_new,
    x_start,
    t: float,
    tol: float = 1e-10,
) -> np.ndarray:
    """Nearest point to *x_start* with ``k_X(x)'w_new = t``.

    A quadratic penalty ``|x - x_start|^2 + rho c(x)^2`` is minimized for
    increasing ``rho`` up to 1e6, then the KKT system
    ``x - x_start + mu grad c(x) = 0, c(x) = 0`` is solved from there.

    Raises
    ------
    ConvergenceError
        If the result is not feasible to 1e-6 or not stationary to 1e-6.
    """
    X = _design(ds)
    w_new = np.asarray(w_new, dtype=float).reshape(-1)
    x_start = np.asarray(x_start, dtype=float).reshape(-1)

    def constraint(x):
        return float(kernel.features(x, X) @ w_new) - t

    def constraint_grad(x):
        return kernel.jacobian(x, X).T @ w_new

    if abs(constraint(x_start)) <= tol:
        return x_start.copy()

    x = x_start.copy()
    rho = _PENALTIES[0]
    for rho in _PENALTIES:
        def objective(z, rho=rho):
            c = constraint(z)
            diff = z - x_start
            return float(diff @ diff) + rho * c * c, 2.0 * diff + 2.0 * rho * c * constraint_grad(z)

        res = optimize.minimize(objective, x, jac=True, method="BFGS", options={"gtol": 1e-12})
        x = res.x

    def kkt(z):
        point, mu = z[:-1], z[-1]
        return np.append(point - x_start + mu * constraint_grad(point), constraint(point))

    solution = optimize.root(kkt, np.append(x, rho * constraint(x)), method="hybr", tol=tol)
    if solution.success:
        logger.debug("Oracle polished in %d evaluations", solution.nfev)
        x = solution.x[:-1]
    residual = abs(constraint(x))
    stationarity = float(np.linalg.norm(kkt(np.append(x, solution.x[-1]))[:-1]))
    if residual > 1e-6 or stationarity > 1e-6:
        raise ConvergenceError(
            f"Oracle did not converge: constraint residual {residual:.3e}, "
            f"stationarity {stationarity:.3e}"
        )
    return x


# ------------------------------------------------------------------
# Validation helpers
# ------------------------------------------------------------------


@dataclass(frozen=True)
class RatioTest:
    """Constraint residuals after first-order updates at eps, eps/2, eps/4."""

    eps: tuple[float, ...]
    residuals: tuple[float, ...]
    ratios: tuple[float, ...]
    low: float = 3.5
    high: float = 4.5

    @property
    def passed(self) -> bool:
        return all(self.low <= r <= self.high for r in self.ratios)


def update_residual(ctx: KernelCounterfactualContext, dw, eps: float) -> float:
    """``k_X(x')'(w + eps dw) - t`` at the first-order update ``x'``."""
    dw = np.asarray(dw, dtype=float).reshape(-1)
    dw = dw / np.linalg.norm(dw)
    moved = first_order_update(ctx, dw, eps)
    return ctx.score(moved, ctx.w + eps * dw) - ctx.t


def ratio_test(ctx: KernelCounterfactualContext, dw, eps: float = 1e-4, halvings: int = 2) -> RatioTest:
    """Halve *eps* repeatedly; an O(eps^2) residual shrinks by ~4 per halving.

    The residual already present at ``eps = 0`` is subtracted first.
    """
    base = ctx.score() - ctx.t
    steps = tuple(eps / 2 ** j for j in range(halvings + 1))
    residuals = tuple(abs(update_residual(ctx, dw, e) - base) for e in steps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = tuple(float(residuals[j] / residuals[j + 1]) for j in range(halvings))
    return RatioTest(steps, residuals, ratios)


def constraint_identity_error(ctx: KernelCounterfactualContext) -> float:
    """``|J*' v - u|_inf`` for the minimal Jacobian ``J*``."""
    J = minimal_jacobian(ctx)
    return float(np.max(np.abs(J.T @ ctx.v - ctx.u)))


def minimality_margin(ctx: KernelCounterfactualContext, dw, samples: int = 100, seed: int = 0) -> float:
    """Smallest ``|J dw| - |J* dw|`` over random ``J = J* + P`` with ``P'v = 0``.

    Non-negative values confirm that no sampled admissible Jacobian moves
    the counterfactual less than the minimal one.
    """
    dw = np.asarray(dw, dtype=float).reshape(-1)
    J_star = minimal_jacobian(ctx)
    best = float(np.linalg.norm(J_star @ dw))
    unit = ctx.v / np.linalg.norm(ctx.v)
    projector = np.eye(unit.shape[0]) - np.outer(unit, unit)
    rng = np.random.default_rng(seed)
    margin = np.inf
    for _ in range(samples):
        P = projector @ rng.normal(size=J_star.shape)
        margin = min(margin, float(np.linalg.norm((J_star + P) @ dw)) - best)
    return margin
