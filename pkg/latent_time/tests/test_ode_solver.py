import math

import numpy as np
from django.test import SimpleTestCase

from latent_time.exceptions import ContractError, NonConvergenceError, NumericError, OutOfRangeError
from latent_time.services.autodiff import Tape, Tensor, backward_gradients, matmul, mul, reduce_sum, scale
from latent_time.services.ode_solver import (
    SolverConfig, dense_eval, dense_eval_rows, solve, solve_at_times, solve_fixed_step, two_phase_solve,
)
from latent_time.services.oracles import linear_ode_h0_gradient, linear_ode_state

TIGHT = SolverConfig(atol=1e-10, rtol=1e-10)


def decay(h, t):
    return scale(h, -1.0)


class AdaptiveSolveTests(SimpleTestCase):
    def test_exponential_decay(self):
        traj = solve(decay, Tensor(np.array([1.0, 2.0])), 0.0, 1.0, TIGHT)
        np.testing.assert_allclose(traj.end_state.values, np.array([1.0, 2.0]) * math.exp(-1.0), rtol=1e-8)

    def test_accepted_times_cover_the_span(self):
        traj = solve(decay, Tensor(np.ones(1)), 0.0, 2.5, SolverConfig(atol=1e-6, rtol=1e-6))
        times = traj.accepted_times
        self.assertEqual(times[0], 0.0)
        self.assertEqual(times[-1], 2.5)
        self.assertTrue(all(b > a for a, b in zip(times, times[1:])))
        self.assertEqual(len(traj.states), len(times))
        self.assertEqual(len(traj.stage_slopes), len(times) - 1)
        self.assertEqual(traj.stats["accepted"], len(times) - 1)

    def test_zero_span_returns_initial_state(self):
        h0 = Tensor(np.ones(3))
        traj = solve(decay, h0, 0.5, 0.5)
        self.assertIs(traj.end_state, h0)
        self.assertEqual(traj.accepted_times, [0.5])

    def test_linear_system_matches_matrix_exponential(self):
        a = np.array([[-0.5, 1.0], [-1.0, -0.5]])
        h0 = np.array([1.0, -0.3])
        traj = solve(lambda h, t: matmul(Tensor(a), h), Tensor(h0), 0.0, 2.0, TIGHT)
        np.testing.assert_allclose(traj.end_state.values, linear_ode_state(a, h0, 2.0), atol=1e-8)

    def test_time_dependent_dynamics(self):
        # dh/dt = t  ->  h(t) = h0 + t^2 / 2
        traj = solve(lambda h, t: Tensor(np.full(h.shape, t)), Tensor(np.zeros(1)), 0.0, 2.0, TIGHT)
        self.assertAlmostEqual(traj.end_state.item(), 2.0, places=10)

    def test_step_budget_is_enforced(self):
        config = SolverConfig(atol=1e-12, rtol=1e-12, max_steps=3)
        with self.assertRaises(NonConvergenceError) as ctx:
            solve(lambda h, t: scale(h, -50.0), Tensor(np.ones(1)), 0.0, 5.0, config)
        self.assertIsNotNone(ctx.exception.last_time)

    def test_non_finite_dynamics_is_a_numeric_failure(self):
        with self.assertRaises(NumericError):
            solve(lambda h, t: scale(h, math.inf), Tensor(np.ones(1)), 0.0, 1.0)

    def test_backwards_span_is_rejected(self):
        with self.assertRaises(ContractError):
            solve(decay, Tensor(np.ones(1)), 1.0, 0.0)


class FixedStepTests(SimpleTestCase):
    def test_fifth_order_convergence(self):
        exact = math.exp(-2.0)
        steps = np.array([4, 8, 16, 32])
        errors = []
        for n in steps:
            traj = solve_fixed_step(decay, Tensor(np.ones(1)), 0.0, 2.0, int(n))
            errors.append(abs(traj.end_state.item() - exact))
        slope, _ = np.polyfit(np.log(2.0 / steps), np.log(errors), 1)
        observed = float(slope)
        self.assertGreater(observed, 4.5)
        self.assertLess(observed, 5.6)

    def test_rejects_zero_steps(self):
        with self.assertRaises(ContractError):
            solve_fixed_step(decay, Tensor(np.ones(1)), 0.0, 1.0, 0)


class DenseOutputTests(SimpleTestCase):
    def setUp(self):
        self.traj = solve(decay, Tensor(np.array([1.0])), 0.0, 3.0, TIGHT)

    def test_accepted_times_return_stored_states(self):
        for t, state in zip(self.traj.accepted_times, self.traj.states):
            self.assertIs(dense_eval(self.traj, t), state)

    def test_interior_points_are_accurate(self):
        for t in np.linspace(0.05, 2.95, 17):
            self.assertAlmostEqual(dense_eval(self.traj, float(t)).item(), math.exp(-t), delta=1e-6)

    def test_outside_span_is_rejected(self):
        with self.assertRaises(OutOfRangeError):
            dense_eval(self.traj, 3.5)
        with self.assertRaises(OutOfRangeError):
            dense_eval(self.traj, -0.1)

    def test_rows_agree_with_scalar_dense_output(self):
        rng = np.random.default_rng(1)
        a = np.array([[-0.2, 0.4], [-0.4, -0.2]])
        h0 = Tensor(rng.standard_normal((3, 2)))
        traj = solve(lambda h, t: matmul(h, Tensor(a)), h0, 0.0, 2.0, SolverConfig(atol=1e-6, rtol=1e-6))
        rows = np.array([0, 1, 2, 2, 0])
        times = np.array([0.0, 0.37, 1.2, 2.0, traj.accepted_times[1]])
        batched = dense_eval_rows(traj, rows, times)
        for i, (row, t) in enumerate(zip(rows, times)):
            np.testing.assert_allclose(batched[i], dense_eval(traj, float(t)).values[row], atol=1e-12)


class QueryTimeTests(SimpleTestCase):
    def test_duplicate_times_share_one_state(self):
        states = solve_at_times(decay, Tensor(np.ones(2)), [0.5, 0.5, 1.0])
        self.assertIs(states[0], states[1])
        self.assertIsNot(states[1], states[2])

    def test_time_zero_is_the_initial_state(self):
        h0 = Tensor(np.ones(2))
        states = solve_at_times(decay, h0, [0.0, 1.0])
        self.assertIs(states[0], h0)

    def test_unsorted_times_are_rejected(self):
        with self.assertRaises(ContractError):
            solve_at_times(decay, Tensor(np.ones(1)), [1.0, 0.5])

    def test_negative_and_empty_times_are_rejected(self):
        with self.assertRaises(ContractError):
            solve_at_times(decay, Tensor(np.ones(1)), [-0.1, 0.5])
        with self.assertRaises(ContractError):
            solve_at_times(decay, Tensor(np.ones(1)), [])


class TwoPhaseTests(SimpleTestCase):
    def test_values_match_the_single_adaptive_solve(self):
        a = np.array([[-0.3, 0.8], [-0.8, -0.3]])
        f = lambda h, t: matmul(Tensor(a), h)  # noqa: E731
        times = [0.2, 0.9, 1.7]
        direct = solve_at_times(f, Tensor(np.array([1.0, 0.5])), times)
        replayed = two_phase_solve(f, Tensor(np.array([1.0, 0.5])), times)
        for x, y in zip(direct, replayed):
            np.testing.assert_array_equal(x.values, y.values)

    def test_gradient_matches_matrix_exponential(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((3, 3)) * 0.5
        seed = rng.standard_normal(3)
        h0 = Tensor(rng.standard_normal(3), requires_grad=True)
        tape = Tape()
        with tape:
            (state,) = two_phase_solve(lambda h, t: matmul(Tensor(a), h), h0, [1.5], TIGHT)
            objective = reduce_sum(mul(state, Tensor(seed)))
        backward_gradients(objective, tape)
        np.testing.assert_allclose(h0.grad, linear_ode_h0_gradient(a, 1.5, seed), rtol=1e-6, atol=1e-8)

    def test_replayed_tape_is_deterministic(self):
        w = Tensor(np.array([[-0.5, 0.2], [0.1, -0.4]]), requires_grad=True)
        tape = Tape()
        with tape:
            states = two_phase_solve(lambda h, t: matmul(h, w), Tensor(np.ones((2, 2))), [0.5, 1.0])
            reduce_sum(states[-1])
        self.assertGreater(len(tape), 0)
        self.assertTrue(tape.replay())
