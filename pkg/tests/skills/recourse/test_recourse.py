"""Tests for skills.recourse.scripts.recourse: recourse generation."""

import unittest

import numpy as np

from data import Dataset
from models import LinearModel, LogisticModel, fit_ntk_weighted, predict_linear, predict_ntk, predict_scores
from recourse import (
    FEASIBILITY_TOL,
    RecourseConfig,
    UnreachableScoreError,
    build_action_cache,
    closed_form_action_jacobians,
    closed_form_actions,
    closed_form_recourse,
    finite_difference_score,
    make_recourse_config,
    prescribe_recourses,
    scfe_gradient,
    scfe_linear,
    scfe_logistic,
    scfe_ntk,
    score_function,
)


def _ntk_model(n=12, d=2, seed=0, beta=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    ds = Dataset(X, np.sin(X[:, 0]) + X[:, 1], tuple(f"x{j}" for j in range(d)))
    return fit_ntk_weighted(ds, None, beta=beta)


class TestRecourseConfig(unittest.TestCase):

    def test_threshold(self):
        self.assertAlmostEqual(RecourseConfig(1.0, validity_margin=0.25).threshold, 0.75)

    def test_threshold_rounding_slack(self):
        self.assertEqual(RecourseConfig(0.0).threshold, -FEASIBILITY_TOL)
        self.assertEqual(RecourseConfig(-4.0).threshold, -4.0 - 4.0 * FEASIBILITY_TOL)
        self.assertLess(RecourseConfig(1.0, validity_margin=1e-4).threshold, 1.0 - 1e-4)

    def test_validation(self):
        with self.assertRaises(ValueError):
            RecourseConfig(float("nan"))
        with self.assertRaises(ValueError):
            RecourseConfig(0.0, lam=-1.0)
        with self.assertRaises(ValueError):
            RecourseConfig(0.0, step_size=0.0)

    def test_make_from_section_defaults(self):
        cfg = make_recourse_config(0.5)
        self.assertEqual(cfg.s, 0.5)
        self.assertEqual(cfg.validity_margin, 0.0)


class TestScfeLinear(unittest.TestCase):

    def test_reaches_target_on_random_instances(self):
        rng = np.random.default_rng(1)
        cfg = RecourseConfig(1.0, lam=1e-6)
        for _ in range(100):
            m = LinearModel(rng.normal(size=5))
            x = rng.normal(size=5)
            result = scfe_linear(m, x, cfg)
            self.assertLessEqual(abs(predict_linear(m, result.x_cf) - 1.0), 1e-4)

    def test_action_parallel_to_weights(self):
        m = LinearModel(np.array([2.0, -1.0]))
        result = scfe_linear(m, np.zeros(2), RecourseConfig(1.0, lam=0.0))
        np.testing.assert_allclose(result.delta, [0.4, -0.2])
        self.assertTrue(result.valid)
        self.assertEqual(result.method, "closed_linear")

    def test_zero_weights_unreachable(self):
        with self.assertRaises(UnreachableScoreError):
            scfe_linear(LinearModel(np.zeros(2)), np.ones(2), RecourseConfig(1.0, lam=0.0))

    def test_zero_weights_with_ridge_gives_no_action(self):
        result = scfe_linear(LinearModel(np.zeros(2)), np.ones(2), RecourseConfig(1.0, lam=1e-3))
        np.testing.assert_array_equal(result.delta, np.zeros(2))
        self.assertFalse(result.valid)


class TestScfeNtk(unittest.TestCase):

    def test_step_along_input_gradient(self):
        m = _ntk_model()
        x = np.array([0.4, -0.8])
        result = scfe_ntk(m, x, RecourseConfig(predict_ntk(m, x) + 0.1, lam=1e-6))
        grad = score_function(m).gradient(x)
        cosine = result.delta @ grad / (np.linalg.norm(result.delta) * np.linalg.norm(grad))
        self.assertAlmostEqual(cosine, 1.0, places=10)
        self.assertAlmostEqual(result.achieved_score, predict_ntk(m, result.x_cf), places=12)

    def test_never_overshoots_the_gap(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(10, 3))
        m = fit_ntk_weighted(Dataset(X, rng.normal(size=10), ("a", "b", "c")), None, beta=0.1)
        cfg = RecourseConfig(0.5, lam=1e-6)
        for x in rng.normal(size=(40, 3)):
            result = scfe_ntk(m, x, cfg)
            self.assertLessEqual(abs(result.achieved_score - 0.5), abs(predict_ntk(m, x) - 0.5))
            self.assertEqual(result.achieved_score, predict_ntk(m, result.x_cf))

    def test_already_at_target(self):
        m = _ntk_model()
        x = np.array([0.4, -0.8])
        result = scfe_ntk(m, x, RecourseConfig(predict_ntk(m, x)))
        np.testing.assert_array_equal(result.delta, np.zeros(2))
        self.assertTrue(result.valid)


class TestScfeLogistic(unittest.TestCase):

    def test_half_probability(self):
        m = LogisticModel(np.array([1.0, 2.0]), 1.0)
        result = scfe_logistic(m, np.array([-1.0, -1.0]), RecourseConfig(0.5, lam=1e-8))
        self.assertAlmostEqual(result.achieved_score, 0.5, places=6)

    def test_target_outside_unit_interval(self):
        m = LogisticModel(np.array([1.0]), 1.0)
        with self.assertRaises(UnreachableScoreError):
            scfe_logistic(m, np.array([0.0]), RecourseConfig(1.0))

    def test_dispatch(self):
        m = LogisticModel(np.array([1.0]), 1.0)
        self.assertEqual(closed_form_recourse(m, [0.0], RecourseConfig(0.7)).method, "closed_logistic")
        with self.assertRaises(TypeError):
            closed_form_recourse(object(), [0.0], RecourseConfig(0.7))


class TestScfeGradient(unittest.TestCase):

    def test_converges_to_closed_form(self):
        m = LinearModel(np.array([1.0, -0.5, 0.25]))
        x = np.array([-1.0, 0.5, 0.0])
        cfg = RecourseConfig(1.0, lam=1e-6, max_iters=1000, step_size=0.05)
        closed = scfe_linear(m, x, cfg)
        result = scfe_gradient(score_function(m), x, cfg)
        self.assertLessEqual(np.linalg.norm(result.delta - closed.delta), 1e-4)

    def test_zero_lam_linear_becomes_valid(self):
        rng = np.random.default_rng(13)
        cfg = RecourseConfig(1.0, lam=0.0, max_iters=5000, step_size=0.05)
        for _ in range(50):
            w = rng.normal(size=3)
            w *= rng.uniform(0.5, 2.0) / np.linalg.norm(w)
            x = rng.normal(size=3)
            x -= (w @ x - rng.uniform(-3.0, 0.0)) * w / (w @ w)
            result = scfe_gradient(score_function(LinearModel(w)), x, cfg)
            self.assertTrue(result.valid, msg=f"score {result.achieved_score!r}")
            self.assertLess(result.iterations, cfg.max_iters)
            self.assertLessEqual(abs(result.achieved_score - 1.0), 1e-9)

    def test_stops_when_valid(self):
        m = LinearModel(np.array([1.0, 0.0]))
        cfg = RecourseConfig(1.0, lam=0.0, step_size=0.1, validity_margin=0.1)
        result = scfe_gradient(score_function(m), np.zeros(2), cfg)
        self.assertTrue(result.valid)
        self.assertGreaterEqual(result.achieved_score, 0.9)
        self.assertLess(result.iterations, cfg.max_iters)

    def test_starting_point_already_valid(self):
        m = LinearModel(np.array([1.0]))
        result = scfe_gradient(score_function(m), np.array([2.0]), RecourseConfig(1.0))
        self.assertEqual(result.iterations, 0)
        np.testing.assert_array_equal(result.delta, [0.0])

    def test_finite_difference_score(self):
        fn = finite_difference_score(lambda x: float(np.sum(x ** 2)))
        np.testing.assert_allclose(fn.gradient(np.array([1.0, -2.0])), [2.0, -4.0], atol=1e-6)

    def test_flat_score_returns_invalid(self):
        fn = finite_difference_score(lambda x: 0.0)
        result = scfe_gradient(fn, np.zeros(2), RecourseConfig(1.0, max_iters=5))
        self.assertFalse(result.valid)


class TestBatchActions(unittest.TestCase):

    def test_linear_batch_matches_single(self):
        m = LinearModel(np.array([1.0, -2.0]))
        X = np.random.default_rng(2).normal(size=(4, 2))
        cache = build_action_cache(m, X)
        actions = closed_form_actions(cache, m.w, 0.5, 1e-6)
        for j in range(4):
            np.testing.assert_allclose(actions[j], scfe_linear(m, X[j], RecourseConfig(0.5, lam=1e-6)).delta)

    def test_ntk_batch_is_the_taylor_step(self):
        m = _ntk_model(seed=3)
        X = np.random.default_rng(4).normal(size=(3, 2))
        actions = closed_form_actions(build_action_cache(m, X), m.dual, 1.0, 1e-6)
        for j in range(3):
            grad = score_function(m).gradient(X[j])
            step = (1.0 - predict_ntk(m, X[j])) / (1e-6 + grad @ grad) * grad
            np.testing.assert_allclose(actions[j], step, atol=1e-12)

    def test_action_jacobian_finite_differences(self):
        m = _ntk_model(seed=5)
        X = np.random.default_rng(6).normal(size=(2, 2))
        cache = build_action_cache(m, X)
        J = closed_form_action_jacobians(cache, m.dual, 1.0, 1e-3)
        self.assertEqual(J.shape, (2, 2, m.dual.shape[0]))
        h = 1e-6
        for k in (0, 5):
            e = np.zeros_like(m.dual)
            e[k] = h
            fd = (closed_form_actions(cache, m.dual + e, 1.0, 1e-3)
                  - closed_form_actions(cache, m.dual - e, 1.0, 1e-3)) / (2 * h)
            np.testing.assert_allclose(J[:, :, k], fd, atol=1e-6)

    def test_logistic_cache_uses_logit(self):
        m = LogisticModel(np.array([1.0, 1.0]), 1.0)
        cache = build_action_cache(m, np.zeros((1, 2)))
        self.assertAlmostEqual(cache.raw_target(0.5), 0.0)
        with self.assertRaises(UnreachableScoreError):
            cache.raw_target(0.0)


class TestPrescribe(unittest.TestCase):

    def test_closed_prescriptions_valid(self):
        m = LinearModel(np.array([1.0, 1.0]))
        X = -np.abs(np.random.default_rng(7).normal(size=(5, 2)))
        cfg = RecourseConfig(0.0, lam=1e-6, validity_margin=1e-4)
        prescribed = prescribe_recourses(m, X, cfg)
        self.assertEqual(prescribed.q, 5)
        self.assertTrue(np.all(prescribed.valid))
        self.assertEqual(prescribed.method, "closed_linear")
        np.testing.assert_allclose(prescribed.scores, predict_scores(m, prescribed.counterfactuals))

    def test_gradient_prescriptions(self):
        m = LinearModel(np.array([1.0, 0.0]))
        cfg = RecourseConfig(0.0, lam=0.0, step_size=0.1, validity_margin=1e-3)
        prescribed = prescribe_recourses(m, np.array([[-1.0, 0.0], [-2.0, 1.0]]), cfg, kind="gradient")
        self.assertEqual(prescribed.method, "gradient")
        self.assertTrue(np.all(prescribed.valid))

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            prescribe_recourses(LinearModel(np.ones(1)), np.zeros((1, 1)), RecourseConfig(0.0), kind="magic")


if __name__ == "__main__":
    unittest.main()
