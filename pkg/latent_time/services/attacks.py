"""
Fast Gradient Sign Method against the end-time ensemble.

The attacked loss is -log p(y | x) at the ensemble mean over S sampled
end-times. The same sorted times are used for the gradient and for scoring
the perturbed input.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from latent_time.exceptions import ContractError
from latent_time.services.autodiff import Tape, Tensor, add, backward_gradients, log, scale, take
from latent_time.services.ml.latent_time_model import (
    LatentTimeModel, forward_at_times, predict_from_times, sample_end_times,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    epsilons: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    clip: tuple[float, float] | None = None
    samples: int = 10
    max_examples: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        if any(e < 0 for e in self.epsilons):
            raise ContractError(f"epsilons must be nonnegative, got {list(self.epsilons)}")
        if list(self.epsilons) != sorted(self.epsilons):
            raise ContractError(f"epsilons must be sorted ascending, got {list(self.epsilons)}")
        if self.clip is not None and not self.clip[0] < self.clip[1]:
            raise ContractError(f"clip range needs lo < hi, got {self.clip}")
        if self.samples < 1:
            raise ContractError(f"samples must be >= 1, got {self.samples}")


def input_gradient(model: LatentTimeModel, x: np.ndarray, y: int, times: np.ndarray) -> np.ndarray:
    """d/dx of -log(mean_s p(y | T_s, x)) with the times held fixed."""
    if model.spec.task != "classification":
        raise ContractError("FGSM needs a classification model")
    x_leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    tape = Tape()
    with tape:
        outputs = forward_at_times(model, x_leaf, np.sort(times), two_phase=True)
        total = take(outputs[0], int(y))
        for out in outputs[1:]:
            total = add(total, take(out, int(y)))
        loss = scale(log(scale(total, 1.0 / len(outputs))), -1.0)
    if not tape.records:
        logger.debug("loss for target %d recorded no operations; input gradient is zero", y)
        return np.zeros_like(x_leaf.values)
    backward_gradients(loss, tape)
    if x_leaf.grad is None:
        logger.debug("loss for target %d does not reach the input; input gradient is zero", y)
        return np.zeros_like(x_leaf.values)
    return x_leaf.grad


def fgsm_perturb(model: LatentTimeModel, x, y: int, epsilon: float, times: np.ndarray,
                 clip: tuple[float, float] | None = None) -> np.ndarray:
    """x + epsilon * sign(grad_x L); sign(0) = 0."""
    if epsilon < 0:
        raise ContractError(f"epsilon must be nonnegative, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0.0:
        return x.copy()
    perturbed = x + epsilon * np.sign(input_gradient(model, x, y, times))
    if clip is not None:
        perturbed = np.clip(perturbed, clip[0], clip[1])
    return perturbed


def fgsm_sweep(model: LatentTimeModel, inputs: np.ndarray, targets: np.ndarray, cfg: AttackConfig,
               rng: np.random.Generator) -> pd.DataFrame:
    """One row per epsilon: error of the ensemble prediction on attacked inputs."""
    if model.spec.task != "classification":
        raise ContractError("fgsm_sweep needs a classification model")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = inputs.shape[0]

    times = [np.sort(sample_end_times(model, x, cfg.samples, rng), kind="stable") for x in inputs]
    signs = [np.sign(input_gradient(model, x, y, t)) for x, y, t in zip(inputs, targets, times)]

    rows = []
    for epsilon in cfg.epsilons:
        wrong = 0
        for x, y, t, s in zip(inputs, targets, times, signs):
            attacked = x.copy() if epsilon == 0.0 else x + epsilon * s
            if epsilon and cfg.clip is not None:
                attacked = np.clip(attacked, cfg.clip[0], cfg.clip[1])
            entry = predict_from_times(model, attacked, t)
            wrong += int(np.argmax(entry.mean) != y)
        rows.append({"epsilon": epsilon, "error": wrong / n if n else 0.0, "n_examples": n})
        logger.info("fgsm epsilon=%.3g error=%.4f", epsilon, rows[-1]["error"])
    return pd.DataFrame(rows, columns=["epsilon", "error", "n_examples"])
