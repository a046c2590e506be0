import math

import numpy as np
from django.test import SimpleTestCase

from latent_time.exceptions import ContractError, NonConvergenceError
from latent_time.services.oracles import (
    QuadratureConfig, aupr_bruteforce, auroc_pair_counting, brier_bruteforce, ece_bruteforce, finite_diff_grad,
    gamma_expectation, kl_by_quadrature, linear_ode_h0_gradient, linear_ode_state, quad_integrate,
)


class QuadratureTests(SimpleTestCase):
    def test_finite_interval(self):
        self.assertAlmostEqual(quad_integrate(math.sin, 0.0, math.pi), 2.0, places=9)

    def test_reversed_interval_flips_sign(self):
        self.assertAlmostEqual(quad_integrate(lambda x: x * x, 1.0, 0.0), -1.0 / 3.0, places=10)

    def test_half_line(self):
        self.assertAlmostEqual(quad_integrate(lambda x: math.exp(-x), 0.0), 1.0, places=8)

    def test_gamma_moments(self):
        self.assertAlmostEqual(gamma_expectation(lambda t: t * t, 3.0, 2.0), 3.0 / 4.0 + 9.0 / 4.0, places=7)

    def test_kl_of_identical_laws_is_zero(self):
        self.assertAlmostEqual(kl_by_quadrature(2.0, 0.5, 2.0, 0.5), 0.0, places=10)

    def test_non_finite_integrand_is_reported(self):
        with self.assertRaises(NonConvergenceError):
            quad_integrate(lambda x: math.inf, 0.0, 1.0)

    def test_evaluation_budget(self):
        with self.assertRaises(NonConvergenceError):
            quad_integrate(math.sqrt, 0.0, 1.0, QuadratureConfig(tolerance=1e-14, max_evaluations=60))
        with self.assertRaises(ContractError):
            QuadratureConfig(tolerance=0.0)


class FiniteDifferenceTests(SimpleTestCase):
    def test_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_allclose(finite_diff_grad(lambda v: float(np.sum(v ** 2)), x), 2 * x, atol=1e-8)

    def test_input_is_left_unchanged(self):
        x = np.array([1.0, 2.0])
        finite_diff_grad(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])


class LinearOdeTests(SimpleTestCase):
    def test_diagonal_system(self):
        a = np.diag([-1.0, 0.5])
        np.testing.assert_allclose(linear_ode_state(a, [1.0, 2.0], 2.0), [math.exp(-2.0), 2.0 * math.e])
        np.testing.assert_allclose(linear_ode_h0_gradient(a, 2.0, [1.0, 1.0]), [math.exp(-2.0), math.e])


class BruteForceMetricTests(SimpleTestCase):
    def test_hand_computed_values(self):
        probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7]])
        targets = [0, 1, 1]
        # bins (0.8, 0.9] holds row 0, (0.5, 0.6] row 1, (0.6, 0.7] row 2
        expected_ece = (abs(0.9 - 1.0) + abs(0.6 - 0.0) + abs(0.7 - 1.0)) / 3.0
        self.assertAlmostEqual(ece_bruteforce(probs, targets), expected_ece, places=12)
        expected_brier = ((0.01 + 0.01) / 2 + (0.36 + 0.36) / 2 + (0.09 + 0.09) / 2) / 3
        self.assertAlmostEqual(brier_bruteforce(probs, targets), expected_brier, places=12)

    def test_pair_counting_with_ties(self):
        self.assertEqual(auroc_pair_counting([0.1, 0.5], [0.5, 0.9]), 0.875)

    def test_average_precision(self):
        # thresholds 0.9 -> (tp 1, fp 0); 0.4 -> (tp 1, fp 1); 0.3 -> (tp 2, fp 1)
        self.assertAlmostEqual(aupr_bruteforce([1, 0, 1], [0.9, 0.4, 0.3]), 0.5 * 1.0 + 0.5 * (2.0 / 3.0))
        self.assertEqual(aupr_bruteforce([0, 0], [0.1, 0.2]), 0.0)
