"""
ELBO objectives and the SGD training loop.

Training-time end-times are drawn from Uniform(a, b) every iteration, sorted,
and integrated once with the two-phase solve. For lt_node and alt_node the
expectation under q is estimated as

    ((b - a) / S) * sum_i sum_s q(T_s) * log p(y_i | T_s, x_i)

and the loss that SGD descends is -ELBO / N.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from django.conf import settings

from latent_time.exceptions import ContractError, NumericError, TrainingDivergedError
from latent_time.services.autodiff import (
    Tensor, Tape, as_tensor, backward_gradients, concat, exp, mul, reduce_sum, reshape, scale,
    softmax_log_likelihood, squared_error, sub, take, zero_grad,
)
from latent_time.services.gamma_dist import GammaParams, gamma_kl_tensor, gamma_log_pdf_tensor
from latent_time.services.ml.latent_time_model import LatentTimeModel
from latent_time.services.ode_solver import two_phase_solve
from latent_time.services.optim import OptimizerState, sgd_update

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerSettings:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0

    def make_state(self, milestones) -> OptimizerState:
        return OptimizerState(
            learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, milestones=list(milestones),
        )


@dataclass(frozen=True)
class ElboConfig:
    prior: GammaParams = GammaParams(2.0, 0.5)
    grid: tuple[float, float] = (0.0, 3.0)
    samples: int = 10
    iterations: int = 3000
    batch_size: int | None = None
    kl_weight: float = 1.0
    network: OptimizerSettings = OptimizerSettings(1e-3, 0.9, 1e-4)
    variational: OptimizerSettings = OptimizerSettings(1e-3, 0.9, 0.0)
    inference: OptimizerSettings = OptimizerSettings(1e-3, 0.9, 5e-4)
    milestones: tuple[tuple[int, float], ...] = ((1000, 10.0), (2000, 10.0))
    seed: int = 0

    def __post_init__(self):
        a, b = self.grid
        if not 0.0 <= a < b:
            raise ContractError(f"training grid needs 0 <= a < b, got {self.grid}")
        if self.samples < 1:
            raise ContractError(f"samples must be >= 1, got {self.samples}")
        if self.iterations < 0:
            raise ContractError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kl_weight < 0:
            raise ContractError(f"kl_weight must be >= 0, got {self.kl_weight}")

    def settings_for(self, group: str) -> OptimizerSettings:
        return {"network": self.network, "variational": self.variational, "inference": self.inference}[group]


def sample_training_times(cfg: ElboConfig, rng: np.random.Generator) -> np.ndarray:
    """Sorted draws from Uniform(a, b]; the open left end keeps t = 0 out of log q."""
    a, b = cfg.grid
    return np.sort(a + (b - a) * (1.0 - rng.random(cfg.samples)), kind="stable")


def likelihood_log_prob(output: Tensor, target, task: str) -> Tensor:
    """
    Row-wise log p(y | output).

    classification: `output` are logits (B, C) or (C,); log-softmax of the target class
    regression:     `output` is the predicted mean; -0.5 * (y - y_hat)^2
    """
    output = as_tensor(output)
    if task == "classification":
        single = output.ndim == 1
        logits = reshape(output, (1, output.shape[0])) if single else output
        target = np.asarray(target, dtype=np.int64).reshape(-1)
        if np.any(target < 0) or np.any(target >= logits.shape[1]):
            raise ContractError(f"target class out of range [0, {logits.shape[1]})")
        ll = softmax_log_likelihood(logits, target)
        return take(ll, 0) if single else ll
    if task == "regression":
        target = np.asarray(target, dtype=np.float64)
        prediction = reshape(output, target.shape) if output.size == target.size else output
        return scale(squared_error(prediction, target), -0.5)
    raise ContractError(f"unknown task {task!r}")


def log_likelihood_matrix(model: LatentTimeModel, inputs: np.ndarray, targets: np.ndarray,
                          times: np.ndarray) -> Tensor:
    """(B, S) matrix of log p(y_i | T_s, x_i) from one recorded two-phase solve."""
    n = inputs.shape[0]
    h0 = model.encode(inputs)
    states = two_phase_solve(model.dynamics, h0, times, model.solver)
    columns: dict[int, Tensor] = {}
    for state in states:
        if id(state) not in columns:
            logits = model.head_logits(state)
            if model.spec.task == "regression":
                logits = reshape(logits, (n,))
            ll = likelihood_log_prob(logits, targets, model.spec.task)
            columns[id(state)] = reshape(ll, (n, 1))
    return concat([columns[id(s)] for s in states], axis=1)


def _expectation(ll: Tensor, log_q: Tensor, cfg: ElboConfig, times: np.ndarray) -> Tensor:
    a, b = cfg.grid
    return scale(reduce_sum(mul(ll, exp(log_q))), (b - a) / len(times))


def elbo_lt(model: LatentTimeModel, inputs, targets, cfg: ElboConfig, rng: np.random.Generator | None = None,
            times=None, batch_scale: float = 1.0) -> Tensor:
    if model.spec.variant != "lt_node":
        raise ContractError(f"elbo_lt needs an lt_node model, got {model.spec.variant}")
    times = sample_training_times(cfg, rng) if times is None else np.sort(np.asarray(times, dtype=np.float64))
    inputs = np.asarray(inputs, dtype=np.float64)
    ll = log_likelihood_matrix(model, inputs, targets, times)
    alpha, beta = model.posterior_tensors()
    expectation = _expectation(ll, gamma_log_pdf_tensor(times, alpha, beta), cfg, times)
    kl = gamma_kl_tensor(alpha, beta, cfg.prior)
    return sub(scale(expectation, batch_scale), scale(kl, cfg.kl_weight))


def elbo_alt(model: LatentTimeModel, inputs, targets, cfg: ElboConfig, rng: np.random.Generator | None = None,
             times=None, batch_scale: float = 1.0) -> Tensor:
    if model.spec.variant != "alt_node":
        raise ContractError(f"elbo_alt needs an alt_node model, got {model.spec.variant}")
    times = sample_training_times(cfg, rng) if times is None else np.sort(np.asarray(times, dtype=np.float64))
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    ll = log_likelihood_matrix(model, inputs, targets, times)
    alpha, beta = model.inference_tensors(inputs)
    log_q = gamma_log_pdf_tensor(times, reshape(alpha, (n, 1)), reshape(beta, (n, 1)))
    expectation = _expectation(ll, log_q, cfg, times)
    kl = reduce_sum(gamma_kl_tensor(alpha, beta, cfg.prior))
    return scale(sub(expectation, scale(kl, cfg.kl_weight)), batch_scale)


def log_likelihood_objective(model: LatentTimeModel, inputs, targets, cfg: ElboConfig,
                             rng: np.random.Generator | None = None, times=None,
                             batch_scale: float = 1.0) -> Tensor:
    """node: log-likelihood at the fixed T. uni_node: mean over Uniform(a, b) draws."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if model.spec.variant == "node":
        times = np.array([model.spec.end_time])
    elif model.spec.variant == "uni_node":
        if times is None:
            a, b = model.spec.uniform
            times = np.sort(a + (b - a) * rng.random(cfg.samples), kind="stable")
        times = np.sort(np.asarray(times, dtype=np.float64))
    else:
        raise ContractError(f"plain likelihood training is for node/uni_node, got {model.spec.variant}")
    ll = log_likelihood_matrix(model, inputs, targets, times)
    return scale(reduce_sum(ll), batch_scale / len(times))


OBJECTIVES = {
    "node": log_likelihood_objective,
    "uni_node": log_likelihood_objective,
    "lt_node": elbo_lt,
    "alt_node": elbo_alt,
}


def trace_columns(variant: str) -> list[str]:
    if variant == "lt_node":
        return ["iteration", "negative_elbo", "alpha_q", "beta_q"]
    if variant == "alt_node":
        return ["iteration", "negative_elbo", "mean_alpha_q", "mean_beta_q"]
    return ["iteration", "negative_log_likelihood"]


@dataclass
class TrainingResult:
    model: LatentTimeModel
    trace: pd.DataFrame
    final_iteration: int = 0
    optimizer_states: dict = field(default_factory=dict)


def train(model: LatentTimeModel, inputs, targets, cfg: ElboConfig, rng: np.random.Generator | None = None,
          log_every: int | None = None) -> TrainingResult:
    """Descend -objective/N with one SGD state per parameter group."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    log_every = log_every or getattr(settings, "LTNODE_LOG_EVERY", 100)
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets)
    n = inputs.shape[0]
    if n == 0:
        raise ContractError("training needs at least one example")

    objective_fn = OBJECTIVES[model.spec.variant]
    groups = model.parameter_groups()
    states = {group: cfg.settings_for(group).make_state(cfg.milestones) for group in groups}
    params = list(model.parameters.values())
    columns = trace_columns(model.spec.variant)
    rows = []

    for iteration in range(cfg.iterations):
        if cfg.batch_size and cfg.batch_size < n:
            index = np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
            batch_x, batch_y, batch_scale = inputs[index], targets[index], n / cfg.batch_size
        else:
            batch_x, batch_y, batch_scale = inputs, targets, 1.0

        zero_grad(params)
        tape = Tape()
        try:
            with tape:
                objective = objective_fn(model, batch_x, batch_y, cfg, rng, batch_scale=batch_scale)
                loss = scale(objective, -1.0 / n)
        except NumericError as exc:
            raise TrainingDivergedError(iteration, str(exc)) from exc
        backward_gradients(loss, tape)

        row = {"iteration": iteration}
        if model.spec.variant == "lt_node":
            posterior = model.posterior()
            row.update(negative_elbo=-objective.item(), alpha_q=posterior.alpha, beta_q=posterior.beta)
        elif model.spec.variant == "alt_node":
            alpha, beta = model.inference_tensors(batch_x)
            row.update(negative_elbo=-objective.item(), mean_alpha_q=float(alpha.values.mean()),
                       mean_beta_q=float(beta.values.mean()))
        else:
            row.update(negative_log_likelihood=-objective.item())
        rows.append(row)

        for group, names in groups.items():
            members = [model.parameters[name] for name in names]
            sgd_update(members, [p.grad for p in members], states[group], iteration)
        for p in params:
            if not np.all(np.isfinite(p.values)):
                raise TrainingDivergedError(iteration, "parameters became non-finite")

        if (iteration + 1) % log_every == 0 or iteration == 0:
            logger.info("iteration %d/%d: %s", iteration + 1, cfg.iterations,
                        ", ".join(f"{k}={v:.6g}" for k, v in row.items() if k != "iteration"))

    return TrainingResult(
        model=model,
        trace=pd.DataFrame(rows, columns=columns),
        final_iteration=cfg.iterations,
        optimizer_states=states,
    )
