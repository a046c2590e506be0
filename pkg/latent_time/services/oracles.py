"""
Slow, independent reference implementations used to check the fast paths.

Nothing here calls the closed-form Gamma functions, the dense-output
interpolant or the vectorized metrics. Gamma densities use math.lgamma;
integrals use adaptive Simpson; metrics are plain loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from latent_time.exceptions import ContractError, NonConvergenceError
from latent_time.services.autodiff import as_tensor, no_record
from latent_time.services.ode_solver import solve

INITIAL_PANELS = 16


@dataclass(frozen=True)
class QuadratureConfig:
    tolerance: float = 1e-9
    max_evaluations: int = 2_000_000
    half_line_scale: float = 1.0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ContractError(f"quadrature tolerance must be positive, got {self.tolerance}")


def _simpson(f: Callable[[float], float], lo: float, hi: float, cfg: QuadratureConfig) -> float:
    """Adaptive Simpson with an explicit work stack."""
    evaluations = 0

    def call(x):
        nonlocal evaluations
        evaluations += 1
        if evaluations > cfg.max_evaluations:
            raise NonConvergenceError(f"quadrature exceeded {cfg.max_evaluations} evaluations", last_time=x)
        value = f(x)
        if not math.isfinite(value):
            raise NonConvergenceError(f"integrand is not finite at {x}", last_time=x)
        return value

    width = (hi - lo) / INITIAL_PANELS
    stack = []
    for k in range(INITIAL_PANELS):
        a = lo + k * width
        b = hi if k == INITIAL_PANELS - 1 else lo + (k + 1) * width
        fa, fm, fb = call(a), call(0.5 * (a + b)), call(b)
        stack.append((a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4 * fm + fb), cfg.tolerance / INITIAL_PANELS))

    parts = []
    while stack:
        a, b, fa, fm, fb, whole, tol = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = call(lm), call(rm)
        left = (m - a) / 6.0 * (fa + 4 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4 * frm + fb)
        delta = left + right - whole
        if abs(delta) <= 15.0 * tol or (b - a) < 1e-14 * max(1.0, abs(a)):
            parts.append(left + right + delta / 15.0)
        else:
            stack.append((a, m, fa, flm, fm, left, 0.5 * tol))
            stack.append((m, b, fm, frm, fb, right, 0.5 * tol))
    return math.fsum(parts)


def quad_integrate(f: Callable[[float], float], lo: float, hi: float = math.inf,
                   cfg: QuadratureConfig | None = None) -> float:
    """Integral of f over [lo, hi]; an infinite hi maps t = lo + c*u/(1-u) onto u in [0, 1)."""
    cfg = cfg or QuadratureConfig()
    if math.isinf(hi):
        c = cfg.half_line_scale

        def mapped(u):
            if u >= 1.0:
                return 0.0
            return f(lo + c * u / (1.0 - u)) * c / ((1.0 - u) ** 2)

        return _simpson(mapped, 0.0, 1.0, cfg)
    if hi < lo:
        return -_simpson(f, hi, lo, cfg)
    return _simpson(f, lo, hi, cfg)


def gamma_log_density(t: float, alpha: float, beta: float) -> float:
    return alpha * math.log(beta) - math.lgamma(alpha) + (alpha - 1.0) * math.log(t) - beta * t


def _unit_gamma_integral(g: Callable[[float], float], alpha: float, cfg: QuadratureConfig) -> float:
    """
    Integral over s in (0, inf) of g(s), where g carries a Gamma(alpha, 1)
    factor. [0, c] uses s = c*u^m so the s^(alpha-1) singularity is smoothed;
    the tail is half-line mapped.
    """
    c = alpha + 10.0 * math.sqrt(alpha) + 10.0
    m = max(2, math.ceil(4.0 / alpha))

    def head(u):
        if u <= 0.0:
            return 0.0
        s = c * u ** m
        if s == 0.0:
            return 0.0
        return g(s) * c * m * u ** (m - 1)

    tail_cfg = QuadratureConfig(cfg.tolerance, cfg.max_evaluations, half_line_scale=max(1.0, math.sqrt(alpha)))
    return _simpson(head, 0.0, 1.0, cfg) + quad_integrate(g, c, math.inf, tail_cfg)


def gamma_expectation(f: Callable[[float], float], alpha: float, beta: float,
                      cfg: QuadratureConfig | None = None) -> float:
    """E[f(T)] for T ~ Gamma(alpha, rate=beta), by quadrature."""
    cfg = cfg or QuadratureConfig()

    def g(s):
        # s = beta * t is Gamma(alpha, 1)
        log_w = (alpha - 1.0) * math.log(s) - s - math.lgamma(alpha)
        return math.exp(log_w) * f(s / beta)

    return _unit_gamma_integral(g, alpha, cfg)


def kl_by_quadrature(q_alpha: float, q_beta: float, p_alpha: float, p_beta: float,
                     cfg: QuadratureConfig | None = None) -> float:
    """Integral of q ln(q / p) over (0, inf)."""
    cfg = cfg or QuadratureConfig(tolerance=1e-10)

    def log_ratio(t):
        return gamma_log_density(t, q_alpha, q_beta) - gamma_log_density(t, p_alpha, p_beta)

    return gamma_expectation(log_ratio, q_alpha, q_beta, cfg)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        upper = f(x)
        flat[i] = keep - step
        lower = f(x)
        flat[i] = keep
        out[i] = (upper - lower) / (2.0 * step)
    return grad


def reference_predict(model, x, times: Sequence[float]) -> list[np.ndarray]:
    """One independent adaptive solve from 0 per requested time; end states only."""
    outputs = []
    with no_record():
        h0 = model.encode(as_tensor(np.asarray(x, dtype=np.float64)))
        for t in times:
            t = float(t)
            state = h0 if t == 0.0 else solve(model.dynamics, h0, 0.0, t, model.solver).end_state
            outputs.append(model.output(state).values.copy())
    return outputs


def linear_ode_state(a, h0, t: float) -> np.ndarray:
    """h(t) = expm(A t) h0 for dh/dt = A h."""
    return expm(np.asarray(a, dtype=np.float64) * t) @ np.asarray(h0, dtype=np.float64)


def linear_ode_h0_gradient(a, t: float, seed) -> np.ndarray:
    """Gradient of seed . h(t) with respect to h0: expm(A^T t) seed."""
    return expm(np.asarray(a, dtype=np.float64).T * t) @ np.asarray(seed, dtype=np.float64)


def ece_bruteforce(probs, targets, num_bins: int = 10) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    n = len(probs)
    members: list[list[tuple[float, float]]] = [[] for _ in range(num_bins)]
    for row, target in zip(probs, targets):
        confidence = max(row)
        predicted = max(range(len(row)), key=lambda c: (row[c], -c))
        chosen = 0
        for k in range(num_bins):
            if edges[k] < confidence <= edges[k + 1]:
                chosen = k
                break
        members[chosen].append((confidence, 1.0 if predicted == int(target) else 0.0))
    total = 0.0
    for bucket in members:
        if bucket:
            avg_conf = sum(c for c, _ in bucket) / len(bucket)
            accuracy = sum(a for _, a in bucket) / len(bucket)
            total += len(bucket) / n * abs(avg_conf - accuracy)
    return total


def brier_bruteforce(probs, targets) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    total = 0.0
    for row, target in zip(probs, targets):
        per_class = 0.0
        for c, p in enumerate(row):
            per_class += (p - (1.0 if c == int(target) else 0.0)) ** 2
        total += per_class / len(row)
    return total / len(probs)


def auroc_pair_counting(in_scores, out_scores) -> float:
    wins = 0.0
    for o in out_scores:
        for i in in_scores:
            if o > i:
                wins += 1.0
            elif o == i:
                wins += 0.5
    return wins / (len(in_scores) * len(out_scores))


def aupr_bruteforce(labels, scores) -> float:
    """Average precision with one operating point per distinct score, thresholds descending."""
    labels = [int(v) for v in labels]
    scores = [float(s) for s in scores]
    positives = sum(labels)
    if positives == 0:
        return 0.0
    ap, previous_recall = 0.0, 0.0
    for tau in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= tau and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= tau and y == 0)
        recall = tp / positives
        ap += (recall - previous_recall) * (tp / (tp + fp))
        previous_recall = recall
    return ap
