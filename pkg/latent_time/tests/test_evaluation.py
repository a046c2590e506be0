import math

import numpy as np
from django.test import SimpleTestCase

from latent_time.exceptions import ContractError
from latent_time.services.evaluation import (
    STD_FLOOR, BinningConfig, PredictiveSet, auroc_aupr, brier_score, classification_metrics,
    differential_entropy, entropies, entropy_categorical, expected_calibration_error,
    regression_region_summary, regression_uncertainty, rejection_and_confidence_curves, rotation_sweep,
)
from latent_time.services.oracles import aupr_bruteforce, auroc_pair_counting, brier_bruteforce, ece_bruteforce


def random_probs(rng, n, c):
    logits = rng.standard_normal((n, c)) * 2.0
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


def classification_set(probs, targets, is_ood=None):
    return PredictiveSet(task="classification", samples=probs[:, None, :], mean=probs,
                         targets=np.asarray(targets), is_ood=is_ood)


class PredictiveSetTests(SimpleTestCase):
    def test_rejects_non_probability_means(self):
        with self.assertRaises(ContractError):
            classification_set(np.array([[0.7, 0.7]]), [0])

    def test_rejects_misaligned_rows(self):
        with self.assertRaises(ContractError):
            PredictiveSet(task="regression", samples=np.zeros((3, 2)), mean=np.zeros(3), std=np.zeros(2))

    def test_subset_and_concatenate(self):
        probs = random_probs(np.random.default_rng(0), 6, 3)
        full = classification_set(probs, np.arange(6) % 3, is_ood=np.array([0, 0, 0, 1, 1, 1], dtype=bool))
        ood = full.subset(full.is_ood)
        self.assertEqual(len(ood), 3)
        joined = PredictiveSet.concatenate([full.subset(~full.is_ood), ood])
        np.testing.assert_array_equal(joined.mean, probs)


class CalibrationTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(42)

    def test_ece_matches_bruteforce(self):
        for c in (2, 3, 5):
            probs = random_probs(self.rng, 200, c)
            targets = self.rng.integers(0, c, 200)
            for bins in (1, 10, 15):
                self.assertAlmostEqual(
                    expected_calibration_error(probs, targets, BinningConfig(bins)),
                    ece_bruteforce(probs, targets, bins), delta=1e-12,
                )

    def test_brier_matches_bruteforce(self):
        probs = random_probs(self.rng, 50, 4)
        targets = self.rng.integers(0, 4, 50)
        self.assertAlmostEqual(brier_score(probs, targets), brier_bruteforce(probs, targets), delta=1e-12)

    def test_perfect_predictions(self):
        probs = np.eye(3)[[0, 2, 1, 1]]
        metrics = classification_metrics(classification_set(probs, [0, 2, 1, 1]))
        self.assertEqual(metrics["error"], 0.0)
        self.assertEqual(metrics["brier"], 0.0)
        self.assertEqual(metrics["ece"], 0.0)
        self.assertEqual(metrics["log_likelihood"], 0.0)

    def test_confidence_on_a_bin_edge_goes_to_the_lower_bin(self):
        bins = BinningConfig(10)
        np.testing.assert_array_equal(bins.assign(np.array([0.0, 0.5, 0.50001, 1.0])), [0, 4, 5, 9])

    def test_metrics_need_targets_in_range(self):
        with self.assertRaises(ContractError):
            classification_metrics(classification_set(np.array([[0.5, 0.5]]), [2]))
        with self.assertRaises(ContractError):
            BinningConfig(0)


class EntropyTests(SimpleTestCase):
    def test_uniform_and_one_hot(self):
        self.assertAlmostEqual(entropy_categorical([0.25] * 4), math.log(4), places=14)
        self.assertEqual(entropy_categorical([0.0, 1.0, 0.0]), 0.0)

    def test_rows_are_bounded_by_log_c(self):
        probs = random_probs(np.random.default_rng(1), 30, 5)
        h = entropies(probs)
        self.assertTrue(np.all((h >= 0.0) & (h <= math.log(5) + 1e-12)))

    def test_unnormalized_input_is_rejected(self):
        with self.assertRaises(ContractError):
            entropies(np.array([[0.2, 0.2]]))

    def test_differential_entropy_floor(self):
        expected = 0.5 * math.log(2 * math.pi * math.e * STD_FLOOR ** 2)
        np.testing.assert_allclose(differential_entropy([0.0, 1.0]), [expected, 0.5 * math.log(2 * math.pi * math.e)])


class OutOfDistributionTests(SimpleTestCase):
    def test_matches_pair_counting_and_bruteforce_precision(self):
        rng = np.random.default_rng(7)
        in_scores = np.round(rng.uniform(0.0, 1.0, 40), 1)
        out_scores = np.round(rng.uniform(0.3, 1.3, 25), 1)
        result = auroc_aupr(in_scores, out_scores)

        labels = np.r_[np.zeros(40), np.ones(25)]
        scores = np.r_[in_scores, out_scores]
        self.assertAlmostEqual(result["auroc"], auroc_pair_counting(in_scores, out_scores), delta=1e-12)
        self.assertAlmostEqual(result["aupr_out"], aupr_bruteforce(labels, scores), delta=1e-12)
        self.assertAlmostEqual(result["aupr_in"], aupr_bruteforce(1 - labels, -scores), delta=1e-12)

    def test_separated_scores(self):
        result = auroc_aupr([0.1, 0.2], [0.8, 0.9, 1.0])
        self.assertEqual(result["auroc"], 1.0)
        self.assertEqual(result["aupr_out"], 1.0)

    def test_constant_scores_give_one_half(self):
        self.assertEqual(auroc_aupr([0.5, 0.5], [0.5])["auroc"], 0.5)

    def test_empty_side_is_rejected(self):
        with self.assertRaises(ContractError):
            auroc_aupr([], [1.0])


class CurveTests(SimpleTestCase):
    def setUp(self):
        self.probs = np.array([[0.95, 0.05], [0.6, 0.4], [0.5, 0.5], [0.1, 0.9], [0.55, 0.45]])
        self.pred = classification_set(self.probs, [0, 1, 0, 1, 0],
                                       is_ood=np.array([False, False, False, False, True]))

    def test_rejection_curve(self):
        curves = rejection_and_confidence_curves(self.pred, [0.0, 0.2, 0.4, 0.6], [0.5])
        rejection = curves["rejection"]
        self.assertEqual(list(rejection.columns), ["rejected_fraction", "accuracy"])
        # correct: rows 0, 2 (tie resolves to class 0) and 3; row 4 is OOD
        self.assertAlmostEqual(rejection["accuracy"][0], 3 / 5)
        # highest entropy first: row 2, then row 4, then row 1
        self.assertAlmostEqual(rejection["accuracy"][1], 2 / 4)
        self.assertAlmostEqual(rejection["accuracy"][2], 2 / 3)
        self.assertAlmostEqual(rejection["accuracy"][3], 2 / 2)

    def test_confidence_curve_counts(self):
        confidence = rejection_and_confidence_curves(self.pred, [0.0], [0.0, 0.9, 0.99])["confidence"]
        self.assertEqual(list(confidence["count"]), [5, 2, 0])
        self.assertAlmostEqual(confidence["accuracy"][1], 1.0)
        self.assertTrue(math.isnan(confidence["accuracy"][2]))

    def test_histogram_splits_id_and_ood(self):
        histogram = rejection_and_confidence_curves(self.pred, [0.0], [0.5])["entropy_histogram"]
        self.assertEqual(int(histogram["id_count"].sum()), 4)
        self.assertEqual(int(histogram["ood_count"].sum()), 1)
        self.assertAlmostEqual(histogram["bin_hi"].iloc[-1], math.log(2))

    def test_fraction_one_is_rejected(self):
        with self.assertRaises(ContractError):
            rejection_and_confidence_curves(self.pred, [1.0], [0.5])


class RegressionSummaryTests(SimpleTestCase):
    def setUp(self):
        self.inputs = np.linspace(-2.0, 2.0, 41)
        std = np.where(np.abs(self.inputs) < 0.5, 0.3, 0.05)
        self.pred = PredictiveSet(task="regression", samples=np.zeros((41, 2)), mean=np.zeros(41), std=std)

    def test_interval_averages(self):
        summary = regression_uncertainty(self.pred, (-0.5, 0.5), self.inputs)
        self.assertAlmostEqual(summary["average_std"], 0.3)
        self.assertAlmostEqual(summary["average_entropy"], float(differential_entropy(0.3)))

    def test_region_summary(self):
        summary = regression_region_summary(self.pred, self.inputs)
        self.assertAlmostEqual(summary["interval_std"], 0.3)
        self.assertAlmostEqual(summary["cluster_std"], 0.05)
        self.assertGreater(summary["interval_entropy"], summary["cluster_entropy"])

    def test_empty_interval_is_rejected(self):
        with self.assertRaises(ContractError):
            regression_uncertainty(self.pred, (5.0, 6.0), self.inputs)


class RotationSweepTests(SimpleTestCase):
    def test_sweep_rows(self):
        inputs = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]])
        targets = np.array([0, 1, 0])

        def predict(x):
            p0 = np.where(x[:, 0] > 0, 0.95, 0.05)
            probs = np.stack([p0, 1.0 - p0], axis=1)
            return classification_set(probs, targets)

        sweep = rotation_sweep(predict, inputs, targets, [0.0, 180.0])
        self.assertEqual(list(sweep.columns), ["angle", "error", "mean_entropy", "mean_confidence", "confident_count"])
        self.assertEqual(sweep["error"][0], 0.0)
        self.assertEqual(sweep["error"][1], 1.0)
        self.assertEqual(list(sweep["confident_count"]), [3, 3])
