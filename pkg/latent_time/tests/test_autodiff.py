import numpy as np
from django.test import SimpleTestCase

from latent_time.exceptions import ContractError, NumericError, ShapeError
from latent_time.services.autodiff import (
    Tape, Tensor, add, backward_gradients, concat, exp, is_recording, log, log_softmax, matmul, mul,
    no_record, pack_parameters, reduce_sum, softmax, softmax_log_likelihood, softplus, tanh, take,
    unpack_parameters, zero_grad,
)
from latent_time.services.oracles import finite_diff_grad
from latent_time.services.optim import OptimizerState, sgd_update


class BackwardTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_two_layer_gradient_matches_central_differences(self):
        x = self.rng.standard_normal((5, 3))
        w1_values = self.rng.standard_normal((3, 4))
        w2_values = self.rng.standard_normal((4, 1))

        def loss_of(w1):
            return float(np.sum(np.logaddexp(0.0, np.tanh(x @ w1) @ w2_values)))

        w1 = Tensor(w1_values.copy(), requires_grad=True)
        tape = Tape()
        with tape:
            loss = reduce_sum(softplus(matmul(tanh(matmul(Tensor(x), w1)), Tensor(w2_values))))
        backward_gradients(loss, tape)

        expected = finite_diff_grad(loss_of, w1_values)
        np.testing.assert_allclose(w1.grad, expected, rtol=1e-5, atol=1e-7)

    def test_random_networks_match_central_differences(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            depth = int(rng.integers(1, 4))
            dims = [int(rng.integers(1, 5))] + [int(w) for w in rng.integers(1, 9, size=depth - 1)] + [1]
            values = [
                [rng.standard_normal((a, b)) / np.sqrt(a), 0.1 * rng.standard_normal(b)]
                for a, b in zip(dims[:-1], dims[1:])
            ]
            x = rng.standard_normal((4, dims[0]))

            def forward(layers):
                h = x
                for i, (w, b) in enumerate(layers):
                    h = h @ w + b
                    if i < len(layers) - 1:
                        h = np.tanh(h)
                return float(np.sum(np.logaddexp(0.0, h)))

            params = [[Tensor(w.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)] for w, b in values]
            tape = Tape()
            with tape:
                h = Tensor(x)
                for i, (w, b) in enumerate(params):
                    h = add(matmul(h, w), b)
                    if i < len(params) - 1:
                        h = tanh(h)
                loss = reduce_sum(softplus(h))
            backward_gradients(loss, tape)

            for k, layer in enumerate(values):
                for j, array in enumerate(layer):
                    def loss_of(v, k=k, j=j):
                        layers = [list(pair) for pair in values]
                        layers[k][j] = v
                        return forward(layers)

                    np.testing.assert_allclose(
                        params[k][j].grad, finite_diff_grad(loss_of, array), rtol=1e-4, atol=1e-7,
                        err_msg=f"seed {seed} layer {k} {'weight' if j == 0 else 'bias'}",
                    )

    def test_broadcast_bias_gradient_sums_over_rows(self):
        a = Tensor(np.zeros((3, 2)))
        bias = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = reduce_sum(add(a, bias))
        backward_gradients(loss, tape)
        np.testing.assert_array_equal(bias.grad, [3.0, 3.0])

    def test_repeated_index_accumulates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = reduce_sum(take(x, np.array([0, 0, 2])))
        backward_gradients(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_reused_tensor_collects_both_paths(self):
        x = Tensor(np.array(1.5), requires_grad=True)
        tape = Tape()
        with tape:
            loss = add(mul(x, x), exp(x))
        backward_gradients(loss, tape)
        self.assertAlmostEqual(x.grad.item(), 2 * 1.5 + np.exp(1.5), places=12)

    def test_softmax_log_likelihood_gradient(self):
        logits_values = self.rng.standard_normal((4, 3))
        targets = np.array([0, 2, 1, 2])

        def loss_of(values):
            shifted = values - values.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            return float(logp[np.arange(4), targets].sum())

        logits = Tensor(logits_values.copy(), requires_grad=True)
        tape = Tape()
        with tape:
            loss = reduce_sum(softmax_log_likelihood(logits, targets))
        backward_gradients(loss, tape)
        np.testing.assert_allclose(logits.grad, finite_diff_grad(loss_of, logits_values), atol=1e-7)

    def test_softmax_and_log_softmax_agree(self):
        z = Tensor(self.rng.standard_normal((2, 5)))
        np.testing.assert_allclose(np.log(softmax(z).values), log_softmax(z).values, atol=1e-12)
        np.testing.assert_allclose(softmax(z).values.sum(axis=1), 1.0)

    def test_concat_splits_gradient_back(self):
        a = Tensor(np.ones((2, 1)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        tape = Tape()
        with tape:
            out = concat([a, b], axis=-1)
            loss = reduce_sum(mul(out, Tensor(np.array([1.0, 2.0, 3.0]))))
        backward_gradients(loss, tape)
        np.testing.assert_array_equal(a.grad, [[1.0], [1.0]])
        np.testing.assert_array_equal(b.grad, [[2.0, 3.0], [2.0, 3.0]])

    def test_gradients_are_overwritten_not_accumulated(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        for _ in range(2):
            tape = Tape()
            with tape:
                loss = reduce_sum(mul(x, x))
            backward_gradients(loss, tape)
        np.testing.assert_array_equal(x.grad, [4.0])
        zero_grad([x])
        self.assertIsNone(x.grad)


class ContractTests(SimpleTestCase):
    def test_non_scalar_output_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            y = tanh(x)
        with self.assertRaises(ContractError):
            backward_gradients(y, tape)

    def test_empty_tape_is_rejected(self):
        with self.assertRaises(ContractError):
            backward_gradients(Tensor(1.0), Tape())

    def test_shape_mismatch_names_the_primitive(self):
        with self.assertRaises(ShapeError) as ctx:
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))
        self.assertIn("add", str(ctx.exception))
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_log_of_non_positive_is_numeric_error(self):
        with self.assertRaises(NumericError):
            log(Tensor(np.array([1.0, 0.0])))

    def test_scopes_must_close_in_order(self):
        outer, inner = Tape(), Tape()
        outer.__enter__()
        inner.__enter__()
        with self.assertRaises(ContractError):
            outer.__exit__(None, None, None)
        inner.__exit__(None, None, None)
        outer.__exit__(None, None, None)
        self.assertFalse(is_recording())


class RecordingTests(SimpleTestCase):
    def test_no_record_leaves_tape_empty(self):
        x = Tensor(np.ones(2), requires_grad=True)
        tape = Tape()
        with tape:
            with no_record():
                self.assertFalse(is_recording())
                tanh(x)
            self.assertTrue(is_recording())
        self.assertEqual(len(tape), 0)

    def test_constants_are_not_recorded(self):
        tape = Tape()
        with tape:
            tanh(Tensor(np.ones(2)))
        self.assertEqual(len(tape), 0)

    def test_replay_reproduces_bitwise(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        tape = Tape()
        with tape:
            reduce_sum(tanh(matmul(Tensor(rng.standard_normal((4, 3))), w)))
        self.assertTrue(tape.replay())


class SerializationTests(SimpleTestCase):
    def test_pack_then_unpack_restores_values(self):
        params = {"a": Tensor(np.arange(6.0).reshape(2, 3)), "b": Tensor(np.array([0.1, -2.5]))}
        table, payload = pack_parameters(params)
        self.assertEqual(len(payload), 8 * 8)
        arrays = unpack_parameters(table, payload)
        np.testing.assert_array_equal(arrays["a"], params["a"].values)
        np.testing.assert_array_equal(arrays["b"], params["b"].values)

    def test_truncated_payload_is_rejected(self):
        table, payload = pack_parameters({"a": Tensor(np.ones(4))})
        with self.assertRaises(ContractError):
            unpack_parameters(table, payload[:-8])


class OptimizerTests(SimpleTestCase):
    def test_plain_step(self):
        p = Tensor(np.array([1.0, 2.0]))
        state = OptimizerState(learning_rate=0.1, momentum=0.0)
        sgd_update([p], [np.array([1.0, -1.0])], state, 0)
        np.testing.assert_allclose(p.values, [0.9, 2.1])

    def test_momentum_and_weight_decay(self):
        p = Tensor(np.array([1.0]))
        state = OptimizerState(learning_rate=0.1, momentum=0.5, weight_decay=0.1)
        sgd_update([p], [np.array([1.0])], state, 0)
        # v = 1 + 0.1 * 1 = 1.1
        np.testing.assert_allclose(p.values, [1.0 - 0.11])
        sgd_update([p], [np.array([1.0])], state, 1)
        v = 0.5 * 1.1 + 1.0 + 0.1 * 0.89
        np.testing.assert_allclose(p.values, [0.89 - 0.1 * v])

    def test_milestone_decays_learning_rate_once(self):
        state = OptimizerState(learning_rate=1.0, momentum=0.0, milestones=[(2, 10.0)])
        p = Tensor(np.zeros(1))
        for iteration in range(4):
            sgd_update([p], [np.zeros(1)], state, iteration)
        self.assertAlmostEqual(state.learning_rate, 0.1)

    def test_missing_gradient_counts_as_zero(self):
        p = Tensor(np.array([3.0]))
        sgd_update([p], [None], OptimizerState(learning_rate=0.5, momentum=0.0), 0)
        np.testing.assert_array_equal(p.values, [3.0])

    def test_negative_learning_rate_is_rejected(self):
        with self.assertRaises(ContractError):
            OptimizerState(learning_rate=-1.0)
