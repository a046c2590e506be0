import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from latent_time.exceptions import CheckpointIntegrityError, ContractError, SpecMismatchError
from latent_time.services.autodiff import no_record, pack_parameters
from latent_time.services.ml.checkpoint import load_checkpoint, read_checkpoint_header, save_checkpoint
from latent_time.services.ml.latent_time_model import (
    ModelSpec, build_model, forward_at_times, infer_endtime_posterior, predict_dataset, predict_from_times,
    predict_probability, sample_end_times,
)
from latent_time.services.ode_solver import SolverConfig
from latent_time.services.oracles import reference_predict

SOLVER = SolverConfig(atol=1e-6, rtol=1e-6)


def small_classifier(variant="lt_node", num_classes=3):
    return ModelSpec(
        input_dim=2, input_block=(6,), node_block=(8, 6), head=(num_classes,), task="classification",
        num_classes=num_classes, variant=variant, activation="tanh", inference_block=(5,),
    )


def small_regressor(variant="lt_node"):
    return ModelSpec(
        input_dim=1, input_block=(5,), node_block=(6, 5), head=(1,), task="regression", variant=variant,
        inference_block=(4,),
    )


class ModelSpecTests(SimpleTestCase):
    def test_presets(self):
        regression = ModelSpec.regression_default()
        self.assertEqual(regression.input_block, (50, 100, 150, 50))
        self.assertEqual(regression.node_block, (100, 150, 100, 50))
        self.assertEqual(regression.head, (1,))
        classifier = ModelSpec.classifier_default(num_classes=4)
        self.assertEqual(classifier.head, (4,))
        self.assertEqual(classifier.activation, "relu")

    def test_round_trips_through_dict(self):
        spec = small_classifier("alt_node")
        self.assertEqual(ModelSpec.from_dict(spec.to_dict()), spec)

    def test_invalid_specs(self):
        with self.assertRaises(ContractError):
            small_classifier("bayes_node")
        with self.assertRaises(ContractError):
            ModelSpec(input_dim=2, input_block=(6,), node_block=(8, 7), head=(2,), task="classification",
                      num_classes=2)
        with self.assertRaises(ContractError):
            ModelSpec(input_dim=2, input_block=(6,), node_block=(6,), head=(3,), task="classification",
                      num_classes=2)
        with self.assertRaises(ContractError):
            ModelSpec(input_dim=1, input_block=(4,), node_block=(4,), head=(2,), task="regression")


class BuildModelTests(SimpleTestCase):
    def test_parameter_layout_per_variant(self):
        lt = build_model(small_classifier("lt_node"), seed=0)
        self.assertIn("end_time.alpha_raw", lt.parameters)
        self.assertEqual(set(lt.parameter_groups()), {"network", "variational"})

        alt = build_model(small_classifier("alt_node"), seed=0)
        self.assertEqual(alt.parameters["inference.1.weight"].shape, (5, 2))
        self.assertEqual(set(alt.parameter_groups()), {"network", "inference"})

        node = build_model(small_classifier("node"), seed=0)
        self.assertEqual(set(node.parameter_groups()), {"network"})
        self.assertEqual(node.parameters["node.0.weight"].shape, (7, 8))

    def test_same_seed_same_parameters(self):
        a = build_model(small_classifier(), seed=4).parameter_values()
        b = build_model(small_classifier(), seed=4).parameter_values()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_initial_posterior_is_the_configured_one(self):
        posterior = build_model(small_classifier(), seed=0).posterior()
        self.assertAlmostEqual(posterior.alpha, 2.0, places=10)
        self.assertAlmostEqual(posterior.beta, 0.5, places=10)

    def test_fan_in_bounds(self):
        model = build_model(small_classifier(), seed=1)
        weight = model.parameters["node.0.weight"].values
        self.assertLessEqual(np.abs(weight).max(), 1.0 / np.sqrt(7))


class ForwardTests(SimpleTestCase):
    def setUp(self):
        self.model = build_model(small_classifier(), seed=2, solver=SOLVER)
        self.x = np.array([0.3, -0.7])

    def test_outputs_are_probability_vectors(self):
        with no_record():
            outputs = forward_at_times(self.model, self.x, [0.0, 0.4, 1.1, 2.0])
        for out in outputs:
            self.assertAlmostEqual(out.values.sum(), 1.0, places=12)
            self.assertTrue(np.all(out.values >= 0.0))

    def test_single_pass_matches_independent_solves(self):
        times = np.array([0.25, 0.8, 0.8, 1.9, 2.6])
        entry = predict_from_times(self.model, self.x, times)
        reference = np.stack(reference_predict(self.model, self.x, times))
        np.testing.assert_allclose(entry.samples, reference, atol=1e-4)
        np.testing.assert_allclose(entry.mean, reference.mean(axis=0), atol=1e-4)

    def test_times_are_sorted_before_solving(self):
        shuffled = predict_from_times(self.model, self.x, np.array([1.5, 0.2, 0.9]))
        np.testing.assert_array_equal(shuffled.times, [0.2, 0.9, 1.5])

    def test_zero_time_is_the_encoded_input(self):
        with no_record():
            (out,) = forward_at_times(self.model, self.x, [0.0])
            expected = self.model.output(self.model.encode(self.x))
        np.testing.assert_array_equal(out.values, expected.values)

    def test_sample_count_must_be_positive(self):
        with self.assertRaises(ContractError):
            predict_probability(self.model, self.x, 0, np.random.default_rng(0))


class EndTimeLawTests(SimpleTestCase):
    def test_node_uses_the_fixed_end_time(self):
        model = build_model(small_classifier("node"), seed=0)
        np.testing.assert_array_equal(sample_end_times(model, None, 4, np.random.default_rng(0)), [1.0] * 4)

    def test_uni_node_stays_in_bounds(self):
        model = build_model(small_classifier("uni_node"), seed=0)
        draws = sample_end_times(model, None, 200, np.random.default_rng(0))
        self.assertTrue(np.all((draws >= 0.0) & (draws < 3.0)))

    def test_alt_node_posterior_is_per_input(self):
        model = build_model(small_classifier("alt_node"), seed=0)
        q = infer_endtime_posterior(model, np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]))
        self.assertEqual(q.alpha_qi.shape, (3,))
        self.assertTrue(np.all(q.alpha_qi > 0.0) and np.all(q.beta_qi > 0.0))
        single = infer_endtime_posterior(model, np.array([2.0, -1.0]))
        self.assertAlmostEqual(float(single.alpha_qi), q.alpha_qi[1], places=12)

    def test_global_posterior_needs_lt_node(self):
        with self.assertRaises(ContractError):
            build_model(small_classifier("alt_node"), seed=0).posterior()


class PredictDatasetTests(SimpleTestCase):
    def test_batched_matches_per_example(self):
        model = build_model(small_classifier("alt_node"), seed=3, solver=SOLVER)
        inputs = np.random.default_rng(0).standard_normal((7, 2))
        pred = predict_dataset(model, inputs, 4, np.random.default_rng(1), batch_size=3)
        self.assertEqual(pred.samples.shape, (7, 4, 3))
        np.testing.assert_allclose(pred.mean.sum(axis=1), 1.0)
        for i in range(7):
            entry = predict_from_times(model, inputs[i], pred.times[i])
            np.testing.assert_allclose(pred.samples[i], entry.samples, atol=1e-4)

    def test_thread_count_does_not_change_results(self):
        model = build_model(small_classifier(), seed=3, solver=SOLVER)
        inputs = np.random.default_rng(0).standard_normal((9, 2))
        serial = predict_dataset(model, inputs, 3, np.random.default_rng(5), batch_size=2, threads=1)
        threaded = predict_dataset(model, inputs, 3, np.random.default_rng(5), batch_size=2, threads=3)
        np.testing.assert_array_equal(serial.samples, threaded.samples)

    def test_regression_has_std(self):
        model = build_model(small_regressor(), seed=0, solver=SOLVER)
        pred = predict_dataset(model, np.linspace(-1, 1, 5).reshape(-1, 1), 6, np.random.default_rng(0))
        self.assertEqual(pred.samples.shape, (5, 6))
        np.testing.assert_allclose(pred.std, pred.samples.std(axis=1))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "checkpoint.bin"

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_and_load_restore_parameters_bitwise(self):
        model = build_model(small_classifier("alt_node"), seed=9, solver=SOLVER)
        save_checkpoint(model, self.path, iteration=12, rng_digest="abc")
        loaded, header = load_checkpoint(self.path, expected_spec=model.spec)
        self.assertEqual(header["iteration"], 12)
        self.assertEqual(loaded.solver, SOLVER)
        for name, tensor in model.parameters.items():
            np.testing.assert_array_equal(loaded.parameters[name].values, tensor.values)

    def test_header_starts_with_little_endian_length(self):
        save_checkpoint(build_model(small_regressor(), seed=0), self.path)
        blob = self.path.read_bytes()
        length = int.from_bytes(blob[:8], "little")
        self.assertEqual(blob[8:9], b"{")
        header, payload = read_checkpoint_header(self.path)
        self.assertEqual(len(blob), 8 + length + len(payload))
        self.assertEqual(header["format"], "ltnode-checkpoint")

    def test_truncated_file_is_rejected(self):
        save_checkpoint(build_model(small_regressor(), seed=0), self.path)
        self.path.write_bytes(self.path.read_bytes()[:-16])
        with self.assertRaises(CheckpointIntegrityError):
            load_checkpoint(self.path)

    def test_garbage_is_rejected(self):
        self.path.write_bytes(b"\x03\x00")
        with self.assertRaises(CheckpointIntegrityError):
            load_checkpoint(self.path)

    def test_variant_parameter_counts_on_disk(self):
        scalars = {}
        for variant in ("node", "lt_node", "alt_node"):
            path = Path(self.tmp.name) / f"{variant}.bin"
            save_checkpoint(build_model(small_classifier(variant), seed=0), path)
            header, payload = read_checkpoint_header(path)
            scalars[variant] = sum(int(np.prod(entry["shape"])) for entry in header["parameters"])
            self.assertEqual(len(payload), 8 * scalars[variant])
        self.assertEqual(scalars["lt_node"] - scalars["node"], 2)
        # inference block 2 -> 5 -> 2 with biases
        self.assertEqual(scalars["alt_node"] - scalars["node"], (2 * 5 + 5) + (5 * 2 + 2))

    def test_presets_differ_by_exactly_the_end_time_parameters(self):
        for preset in (ModelSpec.regression_default, ModelSpec.classifier_default):
            node_table, _ = pack_parameters(build_model(preset(variant="node"), seed=0).parameters)
            lt_table, lt_payload = pack_parameters(build_model(preset(variant="lt_node"), seed=0).parameters)
            self.assertEqual(len(lt_table) - len(node_table), 2)
            self.assertEqual([e["name"] for e in lt_table[len(node_table):]],
                             ["end_time.alpha_raw", "end_time.beta_raw"])
            self.assertEqual(len(lt_payload) - sum(e["nbytes"] for e in node_table), 16)

    def test_spec_mismatch_is_reported(self):
        save_checkpoint(build_model(small_classifier("lt_node"), seed=0), self.path)
        with self.assertRaises(SpecMismatchError) as ctx:
            load_checkpoint(self.path, expected_spec=small_classifier("alt_node"))
        self.assertIn("variant", ctx.exception.mismatches)
