from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from latent_time.exceptions import ContractError, ShapeError
from latent_time.services.autodiff import Tensor


@dataclass
class OptimizerState:
    """SGD with momentum, L2 weight decay and a step-wise learning-rate schedule."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    # (iteration, decay factor): lr is divided by factor once iteration reaches it
    milestones: list[tuple[int, float]] = field(default_factory=list)
    velocities: list[np.ndarray] = field(default_factory=list)
    last_iteration: int = -1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be nonnegative, got {self.weight_decay}")
        self.milestones = sorted((int(i), float(f)) for i, f in self.milestones)


def sgd_update(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState,
               iteration: int) -> OptimizerState:
    """
    One in-place SGD step.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    Milestones crossed since the previous call are applied before the step,
    so the step taken at iteration m already uses the decayed rate.
    """
    if state.learning_rate < 0:
        raise ContractError(f"learning rate must be nonnegative, got {state.learning_rate}")
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")

    for milestone, factor in state.milestones:
        if state.last_iteration < milestone <= iteration:
            state.learning_rate /= factor
    state.last_iteration = iteration

    if not state.velocities:
        state.velocities = [np.zeros_like(p.values) for p in params]

    for p, g, v in zip(params, grads, state.velocities):
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.shape:
            raise ShapeError("sgd_update", p.shape, g.shape)
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.values
        p.values = p.values - state.learning_rate * v
    return state
