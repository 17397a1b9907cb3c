"""Tests for skills.sensitivity.scripts.sensitivity."""

import unittest
import warnings

import numpy as np

from check_sensitivity import rbf_problem
from data import Dataset
from models import ntk_gram
from sensitivity import (
    ConstraintViolationError,
    KernelSpec,
    NoSolutionError,
    NormalizationWarning,
    build_context,
    constraint_identity_error,
    first_order_update,
    fit_kernel_ridge,
    jacobian_action,
    minimal_change_counterfactual_oracle,
    minimal_jacobian,
    minimality_margin,
    ratio_test,
)


def _scalar_context():
    """n = d = 1 linear kernel with w = 2, t = 1, so x_cf = 0.5."""
    return build_context(np.array([[1.0]]), KernelSpec("linear"), [2.0], [0.5], 1.0)


def _rbf_features(gamma):
    return lambda x, X: np.exp(-gamma * np.sum((X - x) ** 2, axis=1))


class TestKernelSpec(unittest.TestCase):

    def test_unknown_kernel(self):
        with self.assertRaises(ValueError):
            KernelSpec("poly")

    def test_custom_needs_function(self):
        with self.assertRaises(ValueError):
            KernelSpec("custom")

    def test_linear_jacobian_is_design(self):
        X = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(KernelSpec("linear").jacobian([1.0, -1.0], X), X)

    def test_rbf_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(5, 3))
        x = rng.normal(size=3)
        analytic = KernelSpec("rbf", gamma=0.7).jacobian(x, X)
        numeric = KernelSpec("custom", fn=_rbf_features(0.7)).jacobian(x, X)
        self.assertEqual(analytic.shape, (5, 3))
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)

    def test_ntk_features_match_gram(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(4, 2))
        x = rng.normal(size=2)
        np.testing.assert_allclose(KernelSpec("ntk").features(x, X), ntk_gram(x[None, :], X)[0])

    def test_ntk_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(4, 3))
        x = rng.normal(size=3)
        analytic = KernelSpec("ntk").jacobian(x, X)
        numeric = KernelSpec("custom", fn=lambda z, A: ntk_gram(z[None, :], A)[0]).jacobian(x, X)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_kernel_ridge_weights(self):
        X = np.array([[1.0], [2.0]])
        ds = Dataset(X, np.array([1.0, 2.0]), ("x0",))
        w = fit_kernel_ridge(ds, KernelSpec("linear"), 1.0)
        np.testing.assert_allclose((X @ X.T + np.eye(2)) @ w, ds.y)
        with self.assertRaises(ValueError):
            fit_kernel_ridge(ds, KernelSpec("linear"), 0.0)


class TestBuildContext(unittest.TestCase):

    def test_vectors(self):
        ctx = _scalar_context()
        np.testing.assert_allclose(ctx.v, [2.0])
        np.testing.assert_allclose(ctx.u, [-0.5])
        self.assertFalse(ctx.degenerate)
        self.assertAlmostEqual(ctx.score(), 1.0)

    def test_off_target_point_rejected(self):
        with self.assertRaises(ConstraintViolationError):
            build_context(np.array([[1.0]]), KernelSpec("linear"), [2.0], [0.6], 1.0)

    def test_weight_length_checked(self):
        with self.assertRaises(ValueError):
            build_context(np.array([[1.0]]), KernelSpec("linear"), [2.0, 1.0], [0.5], 1.0)

    def test_ntk_at_origin_raises(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        with self.assertRaises(ValueError):
            build_context(X, KernelSpec("ntk"), [1.0, 1.0], [0.0, 0.0], 0.0)

    def test_zero_weights_are_degenerate(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        ctx = build_context(X, KernelSpec("rbf"), [0.0, 0.0], [0.3, 0.2], 0.0)
        self.assertTrue(ctx.degenerate)


class TestJacobianAction(unittest.TestCase):

    def test_scalar_slope(self):
        ctx = _scalar_context()
        np.testing.assert_allclose(jacobian_action(ctx, [1.0]), [-0.25])

    def test_parallel_to_v(self):
        ds, kernel, w, x_cf, t, dw = rbf_problem(8, 3, 1.0, 0)
        ctx = build_context(ds, kernel, w, x_cf, t)
        action = jacobian_action(ctx, dw)
        cosine = abs(action @ ctx.v) / (np.linalg.norm(action) * np.linalg.norm(ctx.v))
        self.assertAlmostEqual(cosine, 1.0, places=12)
        self.assertAlmostEqual(float(ctx.v @ action), float(ctx.u @ dw), places=12)

    def test_direction_orthogonal_to_u_does_not_move(self):
        ds, kernel, w, x_cf, t, _ = rbf_problem(8, 2, 1.0, 0)
        ctx = build_context(ds, kernel, w, x_cf, t)
        dw = np.random.default_rng(3).normal(size=ctx.u.shape[0])
        dw -= (dw @ ctx.u) / (ctx.u @ ctx.u) * ctx.u
        np.testing.assert_allclose(jacobian_action(ctx, dw), np.zeros(2), atol=1e-12)

    def test_no_solution_when_v_vanishes(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        ctx = build_context(X, KernelSpec("rbf"), [0.0, 0.0], [0.3, 0.2], 0.0)
        with self.assertRaises(NoSolutionError):
            jacobian_action(ctx, [1.0, 0.0])
        with self.assertRaises(NoSolutionError):
            minimal_jacobian(ctx)

    def test_zero_when_u_and_v_vanish(self):
        X = np.array([[1.0, 0.0]])
        ctx = build_context(X, KernelSpec("linear"), [0.0], [0.0, 1.0], 0.0)
        np.testing.assert_array_equal(jacobian_action(ctx, [1.0]), np.zeros(2))

    def test_minimal_jacobian_identity(self):
        ds, kernel, w, x_cf, t, _ = rbf_problem(8, 2, 1.0, 0)
        ctx = build_context(ds, kernel, w, x_cf, t)
        self.assertEqual(minimal_jacobian(ctx).shape, (2, 8))
        self.assertLessEqual(constraint_identity_error(ctx), 1e-12)


class TestFirstOrderUpdate(unittest.TestCase):

    def test_zero_eps_is_identity(self):
        ctx = _scalar_context()
        np.testing.assert_array_equal(first_order_update(ctx, [1.0], 0.0), ctx.x_cf)

    def test_scalar_matches_exact_move(self):
        ctx = _scalar_context()
        eps = 1e-4
        moved = first_order_update(ctx, [1.0], eps)
        self.assertLessEqual(abs(moved[0] - 1.0 / (2.0 + eps)), 1e-8)

    def test_direction_is_normalized_with_warning(self):
        ctx = _scalar_context()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            moved = first_order_update(ctx, [3.0], 1e-3)
        self.assertTrue(any(issubclass(w.category, NormalizationWarning) for w in caught))
        np.testing.assert_allclose(moved, first_order_update(ctx, [1.0], 1e-3))

    def test_eps_cap(self):
        ctx = _scalar_context()
        with self.assertRaises(ValueError):
            first_order_update(ctx, [1.0], 0.2)

    def test_zero_direction(self):
        ctx = _scalar_context()
        with self.assertRaises(ValueError):
            first_order_update(ctx, [0.0], 1e-3)


class TestOracle(unittest.TestCase):

    def test_feasible_start_returned(self):
        X = np.array([[1.0, 2.0], [0.5, -1.0]])
        w = np.array([1.0, 1.0])
        x = np.array([0.2, 0.4])
        t = float((X @ x) @ w)
        out = minimal_change_counterfactual_oracle(X, KernelSpec("linear"), w, x, t)
        np.testing.assert_array_equal(out, x)

    def test_linear_kernel_projection(self):
        X = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 1.5]])
        w_new = np.array([0.4, -0.2, 0.7])
        x_start = np.array([0.3, -0.8])
        t = 1.0
        a = X.T @ w_new
        expected = x_start + (t - a @ x_start) / (a @ a) * a
        out = minimal_change_counterfactual_oracle(X, KernelSpec("linear"), w_new, x_start, t)
        np.testing.assert_allclose(out, expected, atol=1e-8)

    def test_first_order_update_agrees_on_rbf(self):
        ds, kernel, w, x_cf, t, dw = rbf_problem(8, 2, 1.0, 0)
        ctx = build_context(ds, kernel, w, x_cf, t)
        eps = 1e-4
        oracle = minimal_change_counterfactual_oracle(ds, kernel, w + eps * dw, x_cf, t)
        moved = first_order_update(ctx, dw, eps)
        self.assertLessEqual(
            np.linalg.norm(moved - oracle), 10 * eps * np.linalg.norm(oracle - x_cf)
        )


class TestValidationHelpers(unittest.TestCase):

    def setUp(self):
        ds, kernel, w, x_cf, t, self.dw = rbf_problem(8, 2, 1.0, 0)
        self.ctx = build_context(ds, kernel, w, x_cf, t)

    def test_ratio_test(self):
        result = ratio_test(self.ctx, self.dw)
        self.assertEqual(result.eps, (1e-4, 5e-5, 2.5e-5))
        self.assertEqual(len(result.ratios), 2)
        self.assertTrue(result.passed, msg=str(result.ratios))

    def test_minimality(self):
        self.assertGreaterEqual(minimality_margin(self.ctx, self.dw, samples=50, seed=1), -1e-12)


if __name__ == "__main__":
    unittest.main()
