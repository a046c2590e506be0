"""
Gamma distribution over the ODE end-time.

Special functions are computed here (Lanczos log-gamma, asymptotic
digamma/trigamma) so that the ELBO can differentiate through them with the
autodiff primitives `lgamma` and `digamma` defined at the bottom.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from latent_time.exceptions import DomainError
from latent_time.services.autodiff import Tensor, add, as_tensor, log, mul, primitive, softplus, sub

LANCZOS_G = 7.0
LANCZOS_COEFFS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)
ASYMPTOTIC_FROM = 6.0
POSITIVE_FLOOR = 1e-6


def _positive_array(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0.0):
        raise DomainError(f"{name} requires finite x > 0")
    return x


def _lanczos(x: np.ndarray) -> np.ndarray:
    z = x - 1.0
    series = np.full_like(z, LANCZOS_COEFFS[0])
    for i in range(1, len(LANCZOS_COEFFS)):
        series = series + LANCZOS_COEFFS[i] / (z + i)
    t = z + LANCZOS_G + 0.5
    return HALF_LOG_TWO_PI + (z + 0.5) * np.log(t) - t + np.log(series)


def log_gamma_array(x) -> np.ndarray:
    x = _positive_array(x, "log_gamma")
    small = x < 0.5
    shifted = np.where(small, x + 1.0, x)
    # lgamma(x) = lgamma(x + 1) - ln x keeps the argument in the Lanczos range
    return np.where(small, _lanczos(shifted) - np.log(x), _lanczos(shifted))


def digamma_array(x) -> np.ndarray:
    x = _positive_array(x, "digamma").copy()
    acc = np.zeros_like(x)
    while True:
        low = x < ASYMPTOTIC_FROM
        if not np.any(low):
            break
        acc = np.where(low, acc - 1.0 / x, acc)
        x = np.where(low, x + 1.0, x)
    inv2 = 1.0 / (x * x)
    tail = inv2 * (1 / 12 - inv2 * (1 / 120 - inv2 * (1 / 252 - inv2 * (
        1 / 240 - inv2 * (1 / 132 - inv2 * (691 / 32760 - inv2 / 12))))))
    return acc + np.log(x) - 0.5 / x - tail


def trigamma_array(x) -> np.ndarray:
    x = _positive_array(x, "trigamma").copy()
    acc = np.zeros_like(x)
    while True:
        low = x < ASYMPTOTIC_FROM
        if not np.any(low):
            break
        acc = np.where(low, acc + 1.0 / (x * x), acc)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv + 0.5 * inv2 + inv * inv2 * (1 / 6 - inv2 * (1 / 30 - inv2 * (1 / 42 - inv2 * (
        1 / 30 - inv2 * (5 / 66 - inv2 * (691 / 2730 - inv2 * 7 / 6))))))
    return acc + tail


def log_gamma_fn(x: float) -> float:
    return float(log_gamma_array(x))


def digamma_fn(x: float) -> float:
    return float(digamma_array(x))


def trigamma_fn(x: float) -> float:
    return float(trigamma_array(x))


@dataclass(frozen=True)
class GammaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        for name, value in (("alpha", self.alpha), ("beta", self.beta)):
            if not (math.isfinite(value) and value > 0.0):
                raise DomainError(f"Gamma {name} must be a finite positive number, got {value}")

    @property
    def mean(self) -> float:
        return self.alpha / self.beta

    @property
    def mode(self) -> float:
        return (self.alpha - 1.0) / self.beta if self.alpha >= 1.0 else 0.0

    @property
    def variance(self) -> float:
        return self.alpha / (self.beta * self.beta)

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}


def gamma_log_pdf_array(t, p: GammaParams) -> np.ndarray:
    t = _positive_array(t, "gamma_log_pdf")
    return p.alpha * math.log(p.beta) - log_gamma_fn(p.alpha) + (p.alpha - 1.0) * np.log(t) - p.beta * t


def gamma_log_pdf(t: float, p: GammaParams) -> float:
    return float(gamma_log_pdf_array(t, p))


def gamma_pdf_array(t, p: GammaParams) -> np.ndarray:
    return np.exp(gamma_log_pdf_array(t, p))


def _incomplete_prefactor(a: float, x: np.ndarray) -> np.ndarray:
    return np.exp(-x + a * np.log(x) - log_gamma_fn(a))


def gamma_cdf(t, p: GammaParams, eps: float = 1e-15, max_iter: int = 1000) -> np.ndarray:
    """Regularized lower incomplete gamma P(alpha, beta*t); series below alpha+1, Lentz fraction above."""
    a = p.alpha
    x = np.asarray(t, dtype=np.float64) * p.beta
    out = np.zeros_like(x)
    positive = x > 0.0

    use_series = positive & (x < a + 1.0)
    if np.any(use_series):
        xs = x[use_series]
        ap = np.full_like(xs, a)
        term = np.full_like(xs, 1.0 / a)
        total = term.copy()
        for _ in range(max_iter):
            ap += 1.0
            term *= xs / ap
            total += term
            if np.all(np.abs(term) < np.abs(total) * eps):
                break
        out[use_series] = total * _incomplete_prefactor(a, xs)

    use_fraction = positive & ~use_series
    if np.any(use_fraction):
        xf = x[use_fraction]
        tiny = 1e-300
        b = xf + 1.0 - a
        c = np.full_like(xf, 1.0 / tiny)
        d = 1.0 / b
        h = d.copy()
        for i in range(1, max_iter):
            an = -i * (i - a)
            b = b + 2.0
            d = an * d + b
            d = np.where(np.abs(d) < tiny, tiny, d)
            c = b + an / c
            c = np.where(np.abs(c) < tiny, tiny, c)
            d = 1.0 / d
            delta = d * c
            h *= delta
            if np.all(np.abs(delta - 1.0) < eps):
                break
        out[use_fraction] = 1.0 - _incomplete_prefactor(a, xf) * h
    return out


def _standard_gamma(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    boost = alpha < 1.0
    shape = alpha + 1.0 if boost else alpha
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        want = n - filled
        z = rng.standard_normal(want)
        u = rng.random(want)
        v = (1.0 + c * z) ** 3
        valid = v > 0.0
        safe_v = np.where(valid, v, 1.0)
        squeeze = u < 1.0 - 0.0331 * z ** 4
        full = np.log(np.maximum(u, 1e-300)) < 0.5 * z * z + d - d * safe_v + d * np.log(safe_v)
        accepted = (d * safe_v)[valid & (squeeze | full)]
        take = accepted[: n - filled]
        out[filled:filled + len(take)] = take
        filled += len(take)
    if boost:
        u = 1.0 - rng.random(n)
        out *= u ** (1.0 / alpha)
    return np.maximum(out, np.finfo(np.float64).tiny)


def gamma_sample(p: GammaParams, rng: np.random.Generator, size: int | None = None):
    """Marsaglia–Tsang draws from Gamma(alpha, rate=beta); a float when size is None."""
    n = 1 if size is None else int(size)
    draws = _standard_gamma(p.alpha, n, rng) / p.beta
    return float(draws[0]) if size is None else draws


def uniform_sample(a: float, b: float, rng: np.random.Generator, size: int) -> np.ndarray:
    if not a < b:
        raise DomainError(f"uniform bounds need a < b, got ({a}, {b})")
    return a + (b - a) * rng.random(size)


def gamma_kl(q: GammaParams, p: GammaParams) -> float:
    """KL(q || p) in closed form; exactly 0 for identical parameters."""
    if q == p:
        return 0.0
    value = (
        q.alpha * math.log(q.beta) - p.alpha * math.log(p.beta)
        + log_gamma_fn(p.alpha) - log_gamma_fn(q.alpha)
        + (digamma_fn(q.alpha) - math.log(q.beta)) * (q.alpha - p.alpha)
        + q.alpha * (p.beta / q.beta) - q.alpha
    )
    return max(value, 0.0)


def gamma_kl_grad(q: GammaParams, p: GammaParams) -> tuple[float, float]:
    """(dKL/d alpha_q, dKL/d beta_q)."""
    d_alpha = trigamma_fn(q.alpha) * (q.alpha - p.alpha) + p.beta / q.beta - 1.0
    d_beta = p.alpha / q.beta - q.alpha * p.beta / (q.beta * q.beta)
    return d_alpha, d_beta


# ---------------------------------------------------------------------------
# differentiable pieces
# ---------------------------------------------------------------------------
def lgamma(a: Tensor) -> Tensor:
    return primitive("lgamma", (a,), log_gamma_array, lambda g, out, x: (g * digamma_array(x),))


def digamma(a: Tensor) -> Tensor:
    return primitive("digamma", (a,), digamma_array, lambda g, out, x: (g * trigamma_array(x),))


def positive_from_raw(raw: Tensor) -> Tensor:
    return add(softplus(raw), POSITIVE_FLOOR)


def raw_from_positive(value) -> np.ndarray:
    """Inverse of positive_from_raw on plain values."""
    v = np.asarray(value, dtype=np.float64) - POSITIVE_FLOOR
    if np.any(v <= 0.0):
        raise DomainError(f"value must exceed {POSITIVE_FLOOR}")
    # log(expm1(v)) without overflow for large v
    return np.where(v > 30.0, v + np.log1p(-np.exp(-v)), np.log(np.expm1(np.minimum(v, 30.0))))


def gamma_log_pdf_tensor(times, alpha: Tensor, beta: Tensor) -> Tensor:
    """
    log q(t | alpha, beta) for constant times, differentiable in alpha and beta.
    alpha/beta broadcast against times, e.g. (B, 1) against (S,) gives (B, S).
    """
    t = _positive_array(times, "gamma_log_pdf")
    log_t = Tensor(np.log(t))
    t = Tensor(t)
    head = sub(mul(alpha, log(beta)), lgamma(alpha))
    return sub(add(head, mul(sub(alpha, 1.0), log_t)), mul(beta, t))


def gamma_kl_tensor(alpha_q: Tensor, beta_q: Tensor, prior: GammaParams) -> Tensor:
    """Elementwise KL(Gamma(alpha_q, beta_q) || prior), differentiable in the posterior parameters."""
    alpha_q, beta_q = as_tensor(alpha_q), as_tensor(beta_q)
    log_beta_q = log(beta_q)
    rate_terms = sub(mul(alpha_q, log_beta_q), prior.alpha * np.log(prior.beta))
    norm_terms = sub(log_gamma_array(prior.alpha), lgamma(alpha_q))
    shape_terms = mul(sub(digamma(alpha_q), log_beta_q), sub(alpha_q, prior.alpha))
    ratio_terms = sub(mul(alpha_q, div_const(prior.beta, beta_q)), alpha_q)
    return add(add(add(rate_terms, norm_terms), shape_terms), ratio_terms)


def div_const(c: float, t: Tensor) -> Tensor:
    return primitive("rdiv", (t,), lambda x: c / x, lambda g, out, x: (-g * c / (x * x),))
