"""
Dormand–Prince 5(4) initial-value solver with dense output.

Dynamics are callables `f(state: Tensor, t: float) -> Tensor`; network
parameters are captured by the callable. The state may be a vector (H,) or a
batch (B, H).

Two entry points matter to the models:
  solve_at_times   one adaptive solve to max(times), states read off the
                   dense output (recorded when a tape is active)
  two_phase_solve  adaptive solve without recording, then a recorded replay
                   of exactly the accepted step grid
"""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from latent_time.exceptions import ContractError, NonConvergenceError, NumericError, OutOfRangeError
from latent_time.services.autodiff import Tensor, add, as_tensor, no_record, scale

logger = logging.getLogger(__name__)

Dynamics = Callable[[Tensor, float], Tensor]

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order minus embedded fourth-order weights
E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# dense output: b_j(theta) = sum_m P[j, m] * theta**(m + 1)
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])
ORDER = 5


@dataclass(frozen=True)
class SolverConfig:
    atol: float = 1e-2
    rtol: float = 1e-2
    initial_step: float | None = None
    max_steps: int = 10_000
    safety: float = 0.9
    min_scale: float = 0.2
    max_scale: float = 10.0

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0:
            raise ContractError(f"tolerances must be positive, got atol={self.atol} rtol={self.rtol}")
        if self.max_steps < 1:
            raise ContractError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0.0 < self.safety < 1.0:
            raise ContractError(f"safety must lie in (0, 1), got {self.safety}")
        if not self.min_scale < 1.0 < self.max_scale:
            raise ContractError(f"need min_scale < 1 < max_scale, got ({self.min_scale}, {self.max_scale})")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ContractError(f"initial_step must be positive, got {self.initial_step}")

    def first_step(self, span: float) -> float:
        if self.initial_step is not None:
            return self.initial_step
        return max(1e-2 * span, 1e-6)


@dataclass(frozen=True)
class Trajectory:
    accepted_times: list[float]
    states: list[Tensor]
    # seven stage derivatives per accepted step
    stage_slopes: list[list[Tensor]]
    stats: dict = field(default_factory=dict)

    @property
    def t0(self) -> float:
        return self.accepted_times[0]

    @property
    def t1(self) -> float:
        return self.accepted_times[-1]

    @property
    def end_state(self) -> Tensor:
        return self.states[-1]


def _dp_step(f: Dynamics, t: float, y: Tensor, k1: Tensor, h: float) -> tuple[Tensor, list[Tensor]]:
    """One Dormand–Prince step of size h; returns y(t+h) and all seven stage slopes."""
    k = [k1]
    for i in range(1, 7):
        incr = None
        for j, a in enumerate(A[i]):
            if a == 0.0:
                continue
            term = scale(k[j], h * a)
            incr = term if incr is None else add(incr, term)
        y_stage = add(y, incr)
        if i == 6:
            # the last stage is evaluated at the fifth-order solution itself
            k.append(f(y_stage, t + h))
            return y_stage, k
        k.append(f(y_stage, t + C[i] * h))
    raise AssertionError("unreachable")


def _error_norm(y: np.ndarray, y_new: np.ndarray, k: list[Tensor], h: float, config: SolverConfig) -> float:
    err = h * sum(e * kj.values for e, kj in zip(E, k) if e != 0.0)
    tol = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.max(np.abs(err) / tol)) if err.size else 0.0


def solve(f: Dynamics, h0, t0: float, t1: float, config: SolverConfig | None = None) -> Trajectory:
    """Adaptive solve of dh/dt = f(h, t) on [t0, t1]."""
    config = config or SolverConfig()
    y = as_tensor(h0)
    if t1 < t0:
        raise ContractError(f"solve needs t1 >= t0, got t0={t0} t1={t1}")
    if not np.all(np.isfinite(y.values)):
        raise NumericError("initial state is not finite")
    if t1 == t0:
        return Trajectory([float(t0)], [y], [], {"evaluations": 0, "accepted": 0, "rejected": 0})

    t = float(t0)
    times, states, slopes = [t], [y], []
    k1 = f(y, t)
    evaluations, rejected, attempts = 1, 0, 0
    h = config.first_step(t1 - t0)

    while t < t1:
        if attempts >= config.max_steps:
            raise NonConvergenceError(
                f"step budget of {config.max_steps} exhausted at t={t:.6g} (target {t1:.6g})", last_time=t
            )
        attempts += 1
        t_new = t1 if t + h >= t1 else t + h
        step = t_new - t
        if step <= 0.0:
            raise NonConvergenceError(f"step size underflow at t={t:.6g}", last_time=t)

        y_new, k = _dp_step(f, t, y, k1, step)
        evaluations += 6
        err = _error_norm(y.values, y_new.values, k, step, config)

        if err <= 1.0:
            t, y, k1 = t_new, y_new, k[6]
            times.append(t)
            states.append(y)
            slopes.append(k)
            factor = config.max_scale if err == 0.0 else min(
                config.max_scale, max(config.min_scale, config.safety * err ** (-1.0 / ORDER))
            )
        else:
            rejected += 1
            factor = max(config.min_scale, config.safety * err ** (-1.0 / ORDER))
        h = step * factor

    stats = {"evaluations": evaluations, "accepted": len(slopes), "rejected": rejected}
    logger.debug("dopri5 solve [%g, %g]: %s", t0, t1, stats)
    return Trajectory(times, states, slopes, stats)


def _integrate_grid(f: Dynamics, h0, grid: Sequence[float], replay: bool = False) -> Trajectory:
    """Dormand–Prince steps over a prescribed grid without error control."""
    y = as_tensor(h0)
    times = [float(grid[0])]
    states, slopes = [y], []
    k1 = f(y, times[0])
    for index in range(1, len(grid)):
        t, t_new = float(grid[index - 1]), float(grid[index])
        try:
            y, k = _dp_step(f, t, y, k1, t_new - t)
        except NumericError as exc:
            if not replay:
                raise
            raise NumericError(f"replay step {index} at t={t:.6g}: {exc}") from exc
        k1 = k[6]
        times.append(t_new)
        states.append(y)
        slopes.append(k)
    stats = {"evaluations": 1 + 6 * len(slopes), "accepted": len(slopes), "rejected": 0}
    return Trajectory(times, states, slopes, stats)


def solve_fixed_step(f: Dynamics, h0, t0: float, t1: float, n_steps: int) -> Trajectory:
    if n_steps < 1:
        raise ContractError(f"n_steps must be >= 1, got {n_steps}")
    return _integrate_grid(f, h0, np.linspace(t0, t1, n_steps + 1))


def _weights(theta: float) -> np.ndarray:
    powers = np.array([theta, theta ** 2, theta ** 3, theta ** 4])
    return P @ powers


def dense_eval(traj: Trajectory, t: float) -> Tensor:
    """Fourth-order continuous extension of the accepted steps, evaluated at t."""
    times = traj.accepted_times
    if not times[0] <= t <= times[-1]:
        raise OutOfRangeError(f"t={t} outside trajectory span [{times[0]}, {times[-1]}]")
    index = bisect.bisect_left(times, t)
    if index < len(times) and times[index] == t:
        return traj.states[index]
    step = index - 1
    t_start, t_end = times[step], times[step + 1]
    h = t_end - t_start
    b = _weights((t - t_start) / h)
    y = traj.states[step]
    for j, kj in enumerate(traj.stage_slopes[step]):
        if b[j] != 0.0:
            y = add(y, scale(kj, h * b[j]))
    return y


def dense_eval_rows(traj: Trajectory, rows: np.ndarray, times: np.ndarray) -> np.ndarray:
    """
    Vectorized dense output for a batched trajectory: entry i is row rows[i]
    of the state at times[i]. Values only; nothing is recorded.
    """
    rows = np.asarray(rows, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    grid = np.asarray(traj.accepted_times)
    if times.size and (times.min() < grid[0] or times.max() > grid[-1]):
        raise OutOfRangeError(f"query times outside trajectory span [{grid[0]}, {grid[-1]}]")
    state_values = np.stack([s.values for s in traj.states])
    if len(grid) == 1:
        return state_values[0][rows]

    step = np.clip(np.searchsorted(grid, times, side="right") - 1, 0, len(grid) - 2)
    t_start, t_end = grid[step], grid[step + 1]
    h = t_end - t_start
    theta = (times - t_start) / h
    weights = np.stack([theta, theta ** 2, theta ** 3, theta ** 4], axis=1) @ P.T  # (n, 7)

    slopes = np.stack([np.stack([k.values for k in ks]) for ks in traj.stage_slopes])  # (steps, 7, B, H)
    picked = slopes[step, :, rows, :]  # (n, 7, H)
    result = state_values[step, rows] + np.einsum("nj,njh->nh", weights * h[:, None], picked)

    at_start = times == t_start
    at_end = times == t_end
    result[at_start] = state_values[step[at_start], rows[at_start]]
    result[at_end] = state_values[step[at_end] + 1, rows[at_end]]
    return result


def _check_times(times: Sequence[float]) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0:
        raise ContractError("at least one query time is required")
    if np.any(times < 0.0):
        raise ContractError(f"query times must be >= 0, got min {times.min()}")
    if np.any(np.diff(times) < 0.0):
        raise ContractError("query times must be sorted in nondecreasing order")
    return times


def _read_off(traj: Trajectory, times: np.ndarray) -> list[Tensor]:
    cache: dict[float, Tensor] = {}
    out = []
    for t in times:
        t = float(t)
        if t not in cache:
            cache[t] = dense_eval(traj, t)
        out.append(cache[t])
    return out


def solve_at_times(f: Dynamics, h0, times: Sequence[float], config: SolverConfig | None = None) -> list[Tensor]:
    """Single solve from 0 to max(times); duplicate times share one state object."""
    times = _check_times(times)
    h0 = as_tensor(h0)
    traj = solve(f, h0, 0.0, float(times[-1]), config)
    return _read_off(traj, times)


def two_phase_trajectory(f: Dynamics, h0, t_end: float, config: SolverConfig | None = None) -> Trajectory:
    h0 = as_tensor(h0)
    with no_record():
        grid = solve(f, h0.detach(), 0.0, t_end, config).accepted_times
    return _integrate_grid(f, h0, grid, replay=True)


def two_phase_solve(f: Dynamics, h0, times: Sequence[float], config: SolverConfig | None = None) -> list[Tensor]:
    """
    Phase 1 searches the step grid with recording disabled and keeps only the
    accepted times; phase 2 replays that grid with recording enabled and reads
    the requested states off the recorded dense output.
    """
    times = _check_times(times)
    traj = two_phase_trajectory(f, h0, float(times[-1]), config)
    return _read_off(traj, times)
