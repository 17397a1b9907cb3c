"""Weighted closed-form model fitting and prediction.

Three model families are supported, all fit without an implicit intercept
(callers append a constant column when they want one):

- linear least squares, ``w = (X' W X)^-1 X' W y``
- NTK kernel ridge regression with the two-layer ReLU arc-cosine kernel
- L2-regularized logistic regression fit by damped Newton iterations

Data weights ``omega`` are 0/1 inclusion indicators over training rows.
Fitted models are immutable and safe to share between threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

from data import Dataset

logger = logging.getLogger(__name__)

# Condition estimates above this are treated as singular.
_MAX_CONDITION = 1e12

# Clamp used inside kernel derivatives, where 1/sqrt(1 - u^2) is singular.
_GRADIENT_CLAMP = 1.0 - 1e-12

MODEL_KINDS = ("linear", "ntk", "logistic")


class SingularSystemError(ValueError):
    """Raised when a (weighted) Gram matrix cannot be inverted reliably."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver fails to reach its tolerance."""


# ------------------------------------------------------------------
# Types
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearModel:
    w: np.ndarray

    @property
    def params(self) -> np.ndarray:
        return self.w


@dataclass(frozen=True, eq=False)
class NtkModel:
    """Dual weights over the full training set; deleted rows carry exact zeros."""

    dual: np.ndarray
    X_train: np.ndarray
    beta: float
    weights: np.ndarray

    @property
    def params(self) -> np.ndarray:
        return self.dual


@dataclass(frozen=True, eq=False)
class LogisticModel:
    w: np.ndarray
    l2: float
    converged: bool = True
    grad_norm: float = 0.0
    iterations: int = 0

    @property
    def params(self) -> np.ndarray:
        return self.w


@dataclass(frozen=True)
class ModelSpec:
    """Model family plus its hyperparameters (beta for NTK, l2 for logistic)."""

    kind: str = "linear"
    beta: float = 5.0
    l2: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"Unknown model kind '{self.kind}'; expected one of {MODEL_KINDS}")


# ------------------------------------------------------------------
# Shared helpers
# ------------------------------------------------------------------


def as_data_weights(omega, n: int, binary: bool = True) -> np.ndarray:
    """Validate a data-weight vector of length *n* and return it as floats.

    With ``binary=True`` every entry must be 0 or 1; otherwise entries must
    lie in [0, 1] (relaxed gates).  At least one entry must be positive.
    """
    if omega is None:
        return np.ones(n)
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if omega.shape[0] != n:
        raise ValueError(f"Data weights have length {omega.shape[0]}, expected {n}")
    if binary and not np.all((omega == 0.0) | (omega == 1.0)):
        raise ValueError("Data weights must be 0/1 inclusion indicators")
    if np.any(omega < 0.0) or np.any(omega > 1.0):
        raise ValueError("Data weights must lie in [0, 1]")
    if not np.any(omega > 0.0):
        raise ValueError("Data weights must keep at least one training point")
    return omega


def solve_spd(A: np.ndarray, b: np.ndarray, what: str = "Gram matrix") -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive (semi)definite *A*.

    Cholesky first; a rank-revealing least-squares solve is the fallback.
    Matrices with a condition estimate above 1e12 are rejected.
    """
    condition = float(np.linalg.cond(A))
    if not np.isfinite(condition) or condition > _MAX_CONDITION:
        raise SingularSystemError(
            f"Singular {what}: condition estimate {condition:.3e}", condition
        )
    try:
        return linalg.cho_solve(linalg.cho_factor(A), b)
    except linalg.LinAlgError:
        logger.info("Cholesky failed for %s (cond %.3e); using lstsq", what, condition)
        return linalg.lstsq(A, b)[0]


def _check_dimension(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != d:
        raise ValueError(f"Input has dimension {x.shape[0]}, model expects {d}")
    return x


# ------------------------------------------------------------------
# Linear regression
# ------------------------------------------------------------------


def fit_linear_weighted(ds: Dataset, omega=None) -> LinearModel:
    """Weighted least squares ``(X' W X)^-1 X' W y`` with ``W = diag(omega)``."""
    omega = as_data_weights(omega, ds.n, binary=False)
    Xw = ds.X * omega[:, None]
    gram = ds.X.T @ Xw
    return LinearModel(solve_spd(gram, Xw.T @ ds.y, "weighted Gram matrix X'WX"))


def predict_linear(m: LinearModel, x) -> float:
    x = _check_dimension(x, m.w.shape[0])
    return float(m.w @ x)


# ------------------------------------------------------------------
# NTK kernel
# ------------------------------------------------------------------


def ntk_kernel(x0, x) -> float:
    """Two-layer ReLU NTK: ``x0'x (pi - arccos(u)) / (2 pi)`` with ``u`` the cosine.

    ``K(x, 0) = 0`` by continuity.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    x = _check_dimension(x, x0.shape[0])
    n0 = np.linalg.norm(x0)
    n1 = np.linalg.norm(x)
    if n0 == 0.0 or n1 == 0.0:
        return 0.0
    inner = float(x0 @ x)
    u = 1.0 if np.array_equal(x0, x) else float(np.clip(inner / (n0 * n1), -1.0, 1.0))
    return inner * ((math.pi - math.acos(u)) / (2.0 * math.pi))


def ntk_gram(A, B=None) -> np.ndarray:
    """Kernel matrix ``[K(a_i, b_j)]``; ``B=None`` means ``B = A`` (symmetric)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    symmetric = B is None
    B = A if symmetric else np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"Dimension mismatch: {A.shape[1]} vs {B.shape[1]} features")

    inner = A @ B.T
    norms = np.outer(np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(norms > 0.0, inner / norms, 0.0)
    u = np.clip(u, -1.0, 1.0)
    if symmetric:
        np.fill_diagonal(u, 1.0)
    K = inner * ((np.pi - np.arccos(u)) / (2.0 * np.pi))
    if symmetric:
        K = 0.5 * (K + K.T)
    return K


def ntk_gram_input_gradient(x, X) -> np.ndarray:
    """Gradients ``d K(x, x_i) / d x`` stacked as columns, shape (d, n).

    The cosine is clamped to ``[-1 + 1e-12, 1 - 1e-12]`` in the derivative of
    the arccos term.  Training points at the origin contribute zero columns.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    x = _check_dimension(x, X.shape[1])
    nx = np.linalg.norm(x)
    if nx == 0.0:
        raise ValueError("Input gradient of the NTK is undefined at the zero vector")

    nz = np.linalg.norm(X, axis=1)
    live = nz > 0.0
    inner = X @ x
    u = np.zeros_like(inner)
    u[live] = inner[live] / (nx * nz[live])
    u = np.clip(u, -1.0, 1.0)
    uc = np.clip(u, -_GRADIENT_CLAMP, _GRADIENT_CLAMP)

    # d u / d x = (z/|z| - u x/|x|) / |x|
    unit_z = np.zeros_like(X)
    unit_z[live] = X[live] / nz[live, None]
    du = (unit_z - u[:, None] * (x / nx)[None, :]) / nx
    arc = (np.pi - np.arccos(u)) / (2.0 * np.pi)
    slope = inner / (2.0 * np.pi * np.sqrt(1.0 - uc * uc))
    grads = X * arc[:, None] + slope[:, None] * du
    grads[~live] = 0.0
    return grads.T


# ------------------------------------------------------------------
# NTK regression
# ------------------------------------------------------------------


def fit_ntk_weighted(ds: Dataset, omega=None, beta: float = 5.0, gram: np.ndarray | None = None) -> NtkModel:
    """Weighted kernel ridge: ``W^1/2 (W^1/2 K W^1/2 + beta I)^-1 W^1/2 y``.

    Dual weights of deleted rows are exactly zero.  A precomputed training
    *gram* matrix may be supplied to skip the kernel evaluation.
    """
    if beta <= 0:
        raise ValueError(f"Ridge parameter beta must be > 0, got {beta}")
    omega = as_data_weights(omega, ds.n, binary=False)
    K = ntk_gram(ds.X) if gram is None else gram
    root = np.sqrt(omega)
    system = root[:, None] * K * root[None, :] + beta * np.eye(ds.n)
    dual = root * solve_spd(system, root * ds.y, "regularized kernel matrix")
    return NtkModel(dual, ds.X, float(beta), omega.copy())


def predict_ntk(m: NtkModel, x) -> float:
    x = _check_dimension(x, m.X_train.shape[1])
    return float(ntk_gram(x[None, :], m.X_train)[0] @ m.dual)


def ntk_input_gradient(m: NtkModel, x) -> np.ndarray:
    """Gradient of :func:`predict_ntk` with respect to the input ``x``."""
    return ntk_gram_input_gradient(x, m.X_train) @ m.dual


# ------------------------------------------------------------------
# Logistic regression
# ------------------------------------------------------------------


def logistic_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, omega: np.ndarray, l2: float) -> float:
    """``sum_i omega_i * BCE(y_i, sigmoid(x_i'w)) + l2/2 |w|^2``."""
    z = X @ w
    return float(omega @ (np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))


def logistic_gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray, omega: np.ndarray, l2: float) -> np.ndarray:
    return X.T @ (omega * (expit(X @ w) - y)) + l2 * w


def logistic_hessian(w: np.ndarray, X: np.ndarray, omega: np.ndarray, l2: float) -> np.ndarray:
    p = expit(X @ w)
    return X.T @ (X * (omega * p * (1.0 - p))[:, None]) + l2 * np.eye(X.shape[1])


def fit_logistic_weighted(
    ds: Dataset,
    omega=None,
    l2: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LogisticModel:
    """Newton iterations on the weighted, L2-penalized cross-entropy.

    Each step is halved up to 30 times while the loss increases.  Without
    regularization, perfectly separable retained data has no finite optimum
    and raises :class:`ConvergenceError`.
    """
    if l2 < 0:
        raise ValueError(f"l2 must be >= 0, got {l2}")
    if not np.all((ds.y == 0.0) | (ds.y == 1.0)):
        raise ValueError("Logistic regression needs labels in {0, 1}")
    omega = as_data_weights(omega, ds.n, binary=False)
    kept = omega > 0
    if l2 == 0 and np.unique(ds.y[kept]).size < 2:
        raise ConvergenceError(
            "Retained rows hold a single class; the unregularized optimum diverges"
        )

    X, y = ds.X, ds.y
    w = np.zeros(ds.d)
    loss = logistic_loss(w, X, y, omega, l2)
    grad = logistic_gradient(w, X, y, omega, l2)
    for iteration in range(1, max_iter + 1):
        try:
            step = linalg.solve(logistic_hessian(w, X, omega, l2), grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as exc:
            raise ConvergenceError(f"Newton system became singular at iteration {iteration}") from exc
        # Loss differences near the optimum sit at rounding level.
        slack = 1e-12 * (1.0 + abs(loss))
        scale = 1.0
        for _ in range(31):
            candidate = w - scale * step
            candidate_loss = logistic_loss(candidate, X, y, omega, l2)
            if candidate_loss <= loss + slack:
                w, loss = candidate, candidate_loss
                break
            scale *= 0.5
        else:
            logger.info("Step halving exhausted at iteration %d", iteration)
        grad = logistic_gradient(w, X, y, omega, l2)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            break
    else:
        raise ConvergenceError(
            f"Newton did not reach gradient norm {tol:g} in {max_iter} iterations "
            f"(last {grad_norm:.3e})"
        )

    if l2 == 0:
        margins = (2.0 * y[kept] - 1.0) * (X[kept] @ w)
        if np.all(margins > 0):
            raise ConvergenceError(
                "Retained data are linearly separable; the unregularized optimum diverges"
            )
    return LogisticModel(w, float(l2), True, grad_norm, iteration)


def predict_logistic(m: LogisticModel, x) -> float:
    """Probability of the positive class, ``sigmoid(w'x)``."""
    x = _check_dimension(x, m.w.shape[0])
    return float(expit(m.w @ x))


# ------------------------------------------------------------------
# Dispatch
# ------------------------------------------------------------------


def fit_model(ds: Dataset, omega, spec: ModelSpec, gram: np.ndarray | None = None):
    """Fit the model family described by *spec* under data weights *omega*."""
    if spec.kind == "linear":
        return fit_linear_weighted(ds, omega)
    if spec.kind == "ntk":
        return fit_ntk_weighted(ds, omega, spec.beta, gram=gram)
    return fit_logistic_weighted(ds, omega, spec.l2)


def predict_scores(model, X) -> np.ndarray:
    """Scores of *model* for every row of *X* (probabilities for logistic)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(model, LinearModel):
        return X @ model.w
    if isinstance(model, NtkModel):
        return ntk_gram(X, model.X_train) @ model.dual
    if isinstance(model, LogisticModel):
        return expit(X @ model.w)
    raise TypeError(f"Unsupported model type {type(model).__name__}")
