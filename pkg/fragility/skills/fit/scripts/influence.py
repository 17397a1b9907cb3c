"""Model-parameter updates under training-data deletion.

Exact leave-one-out updates exist for linear regression (rank-one downdate
through the leverage) and for NTK regression (block-inverse of the ridge
system).  Models without a closed form use the infinitesimal jackknife: one
Newton step from the full-data optimum, with the Hessian factorized once.

The ``*Updater`` classes bundle these for the deletion attacks.  Each maps
data weights to a parameter vector ``theta`` such that raw scores are linear
in ``theta`` (``features(X) @ theta``), optionally passed through a link.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

from data import Dataset
from models import (
    LinearModel,
    LogisticModel,
    ModelSpec,
    NtkModel,
    as_data_weights,
    fit_linear_weighted,
    fit_logistic_weighted,
    fit_model,
    fit_ntk_weighted,
    ntk_gram,
    solve_spd,
)

logger = logging.getLogger(__name__)

# Deletions at or above this leverage leave a rank-deficient refit.
MAX_LEVERAGE = 1.0 - 1e-12


class LeverageError(ValueError):
    """Raised when deleting a point would make the weighted problem singular."""


@dataclass(frozen=True, eq=False)
class InfluenceVector:
    """Parameter change ``d_i = w - w_{-i}`` caused by deleting row ``index``.

    ``residual`` and ``leverage`` are set for linear models, where
    ``d_i = (X'X)^-1 x_i r_i / (1 - h_ii)``.
    """

    index: int
    d: np.ndarray
    residual: float | None = None
    leverage: float | None = None


@dataclass(frozen=True, eq=False)
class JackknifeContext:
    """Hessian of the mean loss at the fitted parameters plus per-row gradients.

    ``base_weights`` is the weighting the parameters were fit under (all ones
    for the usual full-data context).
    """

    hessian: np.ndarray
    gradients: np.ndarray
    params: np.ndarray
    base_weights: np.ndarray
    factor: tuple

    @property
    def n(self) -> int:
        return self.gradients.shape[0]


def _retained(omega: np.ndarray) -> np.ndarray:
    return np.flatnonzero(omega > 0)


def _check_index(i: int, n: int) -> int:
    if not 0 <= int(i) < n:
        raise IndexError(f"Row index {i} out of range for {n} training points")
    return int(i)


# ------------------------------------------------------------------
# Linear leave-one-out
# ------------------------------------------------------------------


def loo_linear_all(ds: Dataset, w: np.ndarray, omega=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Influence of deleting each retained row from a weighted linear fit.

    Returns ``(D, h, r)`` with ``D[i] = d_i`` (n x d), leverages ``h`` and
    residuals ``r``.  Rows that are already deleted get NaN.  Rows whose
    leverage reaches ``1 - 1e-12`` get ``inf`` influence.
    """
    omega = as_data_weights(omega, ds.n)
    kept = omega > 0
    gram = ds.X.T @ (ds.X * omega[:, None])
    solved = solve_spd(gram, ds.X.T, "Gram matrix X'X").T  # rows (X'X)^-1 x_i
    h = np.einsum("ij,ij->i", ds.X, solved)
    r = ds.y - ds.X @ w
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(h < MAX_LEVERAGE, r / (1.0 - h), np.inf)
        D = solved * scale[:, None]
    D[~kept] = np.nan
    h = np.where(kept, h, np.nan)
    return D, h, r


def loo_linear(m: LinearModel, ds: Dataset, i: int) -> InfluenceVector:
    """Exact influence ``w - w_{-i}`` for a linear model fit on all of *ds*."""
    i = _check_index(i, ds.n)
    solved = solve_spd(ds.X.T @ ds.X, ds.X[i], "Gram matrix X'X")
    h = float(ds.X[i] @ solved)
    if h >= MAX_LEVERAGE:
        raise LeverageError(
            f"Row {i} has leverage {h:.15f}; deleting it makes X'X singular"
        )
    r = float(ds.y[i] - ds.X[i] @ m.w)
    return InfluenceVector(i, solved * (r / (1.0 - h)), r, h)


# ------------------------------------------------------------------
# NTK leave-one-out
# ------------------------------------------------------------------


def _ridge_inverse(K: np.ndarray, beta: float, kept: np.ndarray) -> np.ndarray:
    sub = K[np.ix_(kept, kept)] + beta * np.eye(kept.size)
    return solve_spd(sub, np.eye(kept.size), "regularized kernel matrix")


def loo_ntk(m: NtkModel, ds: Dataset, i: int, gram: np.ndarray | None = None) -> NtkModel:
    """Delete row *i* from an NTK model by a rank-one update of the ridge inverse.

    ``w_{-i} = (Q - q_i q_i' / Q_ii) y`` on the retained rows, where
    ``Q = (K + beta I)^-1`` and ``q_i`` is its i-th column.  The deleted dual
    coordinate is set to exactly zero.
    """
    i = _check_index(i, ds.n)
    if m.weights[i] == 0:
        raise ValueError(f"Row {i} is already deleted from this model")
    kept = _retained(m.weights)
    K = ntk_gram(ds.X) if gram is None else gram
    Q = _ridge_inverse(K, m.beta, kept)
    a = Q @ ds.y[kept]
    pos = int(np.searchsorted(kept, i))
    if Q[pos, pos] == 0.0:
        raise ValueError(f"Ridge inverse has a zero diagonal entry at row {i}")
    updated = a - Q[:, pos] * (a[pos] / Q[pos, pos])
    updated[pos] = 0.0
    dual = np.zeros(ds.n)
    dual[kept] = updated
    weights = m.weights.copy()
    weights[i] = 0.0
    return NtkModel(dual, m.X_train, m.beta, weights)


def ntk_dual_influences(m: NtkModel, ds: Dataset, gram: np.ndarray | None = None) -> np.ndarray:
    """Dual-space influences ``d_i = q_i q_i' y / Q_ii`` as columns (n x n).

    Columns of deleted rows are zero.
    """
    kept = _retained(m.weights)
    K = ntk_gram(ds.X) if gram is None else gram
    Q = _ridge_inverse(K, m.beta, kept)
    a = Q @ ds.y[kept]
    D = np.zeros((ds.n, ds.n))
    D[np.ix_(kept, kept)] = Q * (a / np.diag(Q))[None, :]
    return D


# ------------------------------------------------------------------
# Infinitesimal jackknife
# ------------------------------------------------------------------


def build_jackknife_context(ds: Dataset, model, omega=None) -> JackknifeContext:
    """Per-row loss gradients and the mean-loss Hessian at *model*'s parameters.

    Linear models use the squared loss ``(y - x'w)^2 / 2``; logistic models
    the cross-entropy with the model's L2 term.  The Hessian is factorized
    here once and reused by every :func:`jackknife_update` call.
    """
    omega = as_data_weights(omega, ds.n)
    X = ds.X
    if isinstance(model, LinearModel):
        w = model.w
        gradients = -X * (ds.y - X @ w)[:, None]
        curvature = np.ones(ds.n)
        l2 = 0.0
    elif isinstance(model, LogisticModel):
        w = model.w
        p = expit(X @ w)
        gradients = X * (p - ds.y)[:, None]
        curvature = p * (1.0 - p)
        l2 = model.l2
    else:
        raise TypeError(f"No jackknife loss for {type(model).__name__}")

    hessian = (X.T @ (X * (omega * curvature)[:, None]) + l2 * np.eye(ds.d)) / ds.n
    try:
        factor = linalg.cho_factor(hessian)
    except linalg.LinAlgError as exc:
        raise ValueError("Hessian of the mean loss is singular") from exc
    return JackknifeContext(hessian, gradients, w.copy(), omega.copy(), factor)


def jackknife_update(ctx: JackknifeContext, omega) -> np.ndarray:
    """``w_IJ(omega) = w - H^-1 (1/n) sum_i (omega_i - base_i) g_i``."""
    omega = as_data_weights(omega, ctx.n, binary=False)
    G = ctx.gradients.T @ (omega - ctx.base_weights) / ctx.n
    return ctx.params - linalg.cho_solve(ctx.factor, G)


def jackknife_influences(ctx: JackknifeContext) -> np.ndarray:
    """Jackknife influence ``w - w_IJ(base - e_i)`` of every row (n x p)."""
    D = -linalg.cho_solve(ctx.factor, ctx.gradients.T).T / ctx.n
    D[ctx.base_weights == 0] = np.nan
    return D


def jackknife_jacobian(ctx: JackknifeContext) -> np.ndarray:
    """``d w_IJ / d omega`` (p x n); constant because the update is affine."""
    return -linalg.cho_solve(ctx.factor, ctx.gradients.T) / ctx.n


# ------------------------------------------------------------------
# Refit oracle
# ------------------------------------------------------------------


def refit_exact(ds: Dataset, omega, model_kind: str, hyper: dict | None = None):
    """Ground-truth refit of *model_kind* on the rows retained by *omega*."""
    spec = ModelSpec(model_kind, **(hyper or {}))
    return fit_model(ds, as_data_weights(omega, ds.n), spec)


# ------------------------------------------------------------------
# Updaters used by the attacks
# ------------------------------------------------------------------


class LinearUpdater:
    """Closed-form weighted least squares; surrogate and exact coincide."""

    kind = "linear"
    link = "identity"

    def __init__(self, ds: Dataset, spec: ModelSpec | None = None):
        self.ds = ds
        self.spec = spec or ModelSpec("linear")

    def exact(self, omega) -> np.ndarray:
        return fit_linear_weighted(self.ds, omega).w

    surrogate = exact

    def deletion_candidates(self, omega, params=None) -> tuple[np.ndarray, np.ndarray]:
        """Parameters after deleting each retained row (columns, d x n) and a feasibility mask."""
        omega = as_data_weights(omega, self.ds.n)
        params = self.exact(omega) if params is None else params
        D, h, _ = loo_linear_all(self.ds, params, omega)
        feasible = (omega > 0) & (np.nan_to_num(h, nan=1.0) < MAX_LEVERAGE)
        P = params[:, None] - np.where(feasible[:, None], D, 0.0).T
        return P, feasible

    def jacobian(self, omega) -> np.ndarray:
        """``d w / d omega_i = (X'WX)^-1 x_i (y_i - x_i'w)`` as columns (d x n)."""
        omega = as_data_weights(omega, self.ds.n, binary=False)
        X = self.ds.X
        gram = X.T @ (X * omega[:, None])
        w = solve_spd(gram, X.T @ (omega * self.ds.y), "weighted Gram matrix X'WX")
        return solve_spd(gram, X.T * (self.ds.y - X @ w)[None, :], "weighted Gram matrix X'WX")

    def features(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float))

    def to_model(self, params, omega=None) -> LinearModel:
        return LinearModel(np.asarray(params, dtype=float))


class NtkUpdater:
    """Weighted kernel ridge in closed form, with the training Gram matrix cached."""

    kind = "ntk"
    link = "identity"

    def __init__(self, ds: Dataset, spec: ModelSpec | None = None):
        self.ds = ds
        self.spec = spec or ModelSpec("ntk")
        self.gram = ntk_gram(ds.X)

    def exact(self, omega) -> np.ndarray:
        return fit_ntk_weighted(self.ds, omega, self.spec.beta, gram=self.gram).dual

    surrogate = exact

    def deletion_candidates(self, omega, params=None) -> tuple[np.ndarray, np.ndarray]:
        """Dual weights after deleting each retained row (columns, n x n)."""
        omega = as_data_weights(omega, self.ds.n)
        kept = _retained(omega)
        Q = _ridge_inverse(self.gram, self.spec.beta, kept)
        a = Q @ self.ds.y[kept]
        C = a[:, None] - Q * (a / np.diag(Q))[None, :]
        np.fill_diagonal(C, 0.0)
        P = np.zeros((self.ds.n, self.ds.n))
        P[np.ix_(kept, kept)] = C
        return P, omega > 0

    def jacobian(self, omega) -> np.ndarray:
        """``d w / d omega`` (n x n) for relaxed weights.

        With ``B = K W + beta I`` and ``a = B^-1 y`` the dual weights are
        ``W a``, so column i is ``a_i (e_i - W B^-1 k_i)``.
        """
        omega = as_data_weights(omega, self.ds.n, binary=False)
        B = self.gram * omega[None, :] + self.spec.beta * np.eye(self.ds.n)
        a = linalg.solve(B, self.ds.y)
        return np.diag(a) - (omega[:, None] * linalg.solve(B, self.gram)) * a[None, :]

    def features(self, X) -> np.ndarray:
        return ntk_gram(X, self.ds.X)

    def to_model(self, params, omega=None) -> NtkModel:
        omega = np.ones(self.ds.n) if omega is None else np.asarray(omega, dtype=float)
        return NtkModel(np.asarray(params, dtype=float), self.ds.X, self.spec.beta, omega)


class LogisticUpdater:
    """Newton refits for ground truth, the infinitesimal jackknife for search."""

    kind = "logistic"
    link = "logistic"

    def __init__(self, ds: Dataset, spec: ModelSpec | None = None):
        self.ds = ds
        self.spec = spec or ModelSpec("logistic")
        self.base_model = fit_logistic_weighted(ds, None, self.spec.l2)
        self.context = build_jackknife_context(ds, self.base_model)

    def exact(self, omega) -> np.ndarray:
        return fit_logistic_weighted(self.ds, omega, self.spec.l2).w

    def surrogate(self, omega) -> np.ndarray:
        return jackknife_update(self.context, omega)

    def deletion_candidates(self, omega, params=None) -> tuple[np.ndarray, np.ndarray]:
        """Jackknife candidates around the exact fit under *omega* (d x n)."""
        omega = as_data_weights(omega, self.ds.n)
        params = self.exact(omega) if params is None else params
        model = LogisticModel(params, self.spec.l2)
        ctx = build_jackknife_context(self.ds, model, omega)
        D = np.nan_to_num(jackknife_influences(ctx), nan=0.0)
        return params[:, None] - D.T, omega > 0

    def jacobian(self, omega) -> np.ndarray:
        return jackknife_jacobian(self.context)

    def features(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float))

    def to_model(self, params, omega=None) -> LogisticModel:
        return LogisticModel(np.asarray(params, dtype=float), self.spec.l2)


_UPDATERS = {"linear": LinearUpdater, "ntk": NtkUpdater, "logistic": LogisticUpdater}


def make_updater(ds: Dataset, spec: ModelSpec):
    """Updater for the model family in *spec*."""
    return _UPDATERS[spec.kind](ds, spec)


def apply_link(updater, raw: np.ndarray) -> np.ndarray:
    return expit(raw) if updater.link == "logistic" else raw


def link_derivative(updater, raw: np.ndarray) -> np.ndarray:
    if updater.link == "logistic":
        p = expit(raw)
        return p * (1.0 - p)
    return np.ones_like(raw)
