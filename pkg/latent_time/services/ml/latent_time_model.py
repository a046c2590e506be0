"""
NODE model zoo: node, uni_node, lt_node, alt_node.

A model is d(.) (input block) -> ODE with dynamics f(h, t) (node block)
-> g(.) (head). The variants differ only in how the end-time T is chosen:

  node      fixed T = spec.end_time
  uni_node  T ~ Uniform(a, b)
  lt_node   T ~ Gamma(alpha_q, beta_q), two global learned scalars
  alt_node  T ~ Gamma(alpha_qi, beta_qi) = r(x_i; phi), an inference network
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from latent_time.exceptions import ContractError
from latent_time.services.autodiff import (
    Tensor, add, as_tensor, concat, matmul, no_record, relu, softmax, tanh, take,
)
from latent_time.services.evaluation import PredictiveSet
from latent_time.services.gamma_dist import (
    GammaParams, gamma_sample, positive_from_raw, raw_from_positive, uniform_sample,
)
from latent_time.services.ode_solver import (
    SolverConfig, dense_eval_rows, solve, solve_at_times, two_phase_solve,
)

logger = logging.getLogger(__name__)

VARIANTS = ("node", "uni_node", "lt_node", "alt_node")
TASKS = ("regression", "classification")
ACTIVATIONS = {"tanh": tanh, "relu": relu}


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    input_block: tuple[int, ...]
    node_block: tuple[int, ...]
    head: tuple[int, ...]
    task: str = "regression"
    num_classes: int | None = None
    variant: str = "lt_node"
    activation: str = "tanh"
    end_time: float = 1.0
    uniform: tuple[float, float] = (0.0, 3.0)
    posterior_init: tuple[float, float] = (2.0, 0.5)
    inference_block: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        for name in ("input_block", "node_block", "head", "inference_block"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        object.__setattr__(self, "uniform", tuple(float(v) for v in self.uniform))
        object.__setattr__(self, "posterior_init", tuple(float(v) for v in self.posterior_init))

        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be >= 1, got {self.input_dim}")
        for name in ("input_block", "node_block", "head", "inference_block"):
            widths = getattr(self, name)
            if not widths or any(w < 1 for w in widths):
                raise ContractError(f"{name} widths must be nonempty and >= 1, got {list(widths)}")
        if self.node_block[-1] != self.hidden_dim:
            raise ContractError(
                f"node_block must end at the hidden width {self.hidden_dim}, got {self.node_block[-1]}"
            )
        if self.task == "classification":
            if self.num_classes is None or self.num_classes < 2:
                raise ContractError(f"classification needs num_classes >= 2, got {self.num_classes}")
            if self.head[-1] != self.num_classes:
                raise ContractError(f"head must end at {self.num_classes} classes, got {self.head[-1]}")
        elif self.head[-1] != 1:
            raise ContractError(f"regression head must emit a scalar, got width {self.head[-1]}")
        if self.end_time < 0:
            raise ContractError(f"end_time must be >= 0, got {self.end_time}")
        if not 0.0 <= self.uniform[0] < self.uniform[1]:
            raise ContractError(f"uniform bounds need 0 <= a < b, got {self.uniform}")
        if min(self.posterior_init) <= 0:
            raise ContractError(f"posterior_init must be positive, got {self.posterior_init}")

    @property
    def hidden_dim(self) -> int:
        return self.input_block[-1]

    @classmethod
    def regression_default(cls, variant: str = "lt_node") -> "ModelSpec":
        return cls(
            input_dim=1, input_block=(50, 100, 150, 50), node_block=(100, 150, 100, 50), head=(1,),
            task="regression", variant=variant, activation="tanh",
        )

    @classmethod
    def classifier_default(cls, num_classes: int = 2, input_dim: int = 2, variant: str = "lt_node") -> "ModelSpec":
        return cls(
            input_dim=input_dim, input_block=(16, 32), node_block=(32, 32), head=(num_classes,),
            task="classification", num_classes=num_classes, variant=variant, activation="relu",
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(**data)


@dataclass(frozen=True)
class InferenceNetOutput:
    alpha_qi: np.ndarray
    beta_qi: np.ndarray


def _layer_shapes(fan_in: int, widths: tuple[int, ...]) -> list[tuple[int, int]]:
    shapes = []
    for width in widths:
        shapes.append((fan_in, width))
        fan_in = width
    return shapes


@dataclass
class LatentTimeModel:
    spec: ModelSpec
    parameters: dict[str, Tensor]
    solver: SolverConfig = field(default_factory=SolverConfig)

    # -- parameter bookkeeping ---------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def parameter_groups(self) -> dict[str, list[str]]:
        """network: theta; variational: (alpha_q, beta_q) raw; inference: phi."""
        groups = {"network": [], "variational": [], "inference": []}
        for name in self.parameters:
            if name.startswith("end_time."):
                groups["variational"].append(name)
            elif name.startswith("inference."):
                groups["inference"].append(name)
            else:
                groups["network"].append(name)
        return {k: v for k, v in groups.items() if v}

    def parameter_values(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.parameters.items()}

    def load_parameter_values(self, values: dict[str, np.ndarray]):
        for name, array in values.items():
            self.parameters[name].values = np.array(array, dtype=np.float64)

    def _layers(self, prefix: str) -> list[tuple[Tensor, Tensor]]:
        layers, index = [], 0
        while f"{prefix}.{index}.weight" in self.parameters:
            layers.append((self.parameters[f"{prefix}.{index}.weight"], self.parameters[f"{prefix}.{index}.bias"]))
            index += 1
        return layers

    def _mlp(self, x: Tensor, prefix: str, activate_last: bool) -> Tensor:
        activation = ACTIVATIONS[self.spec.activation]
        layers = self._layers(prefix)
        for i, (w, b) in enumerate(layers):
            x = add(matmul(x, w), b)
            if activate_last or i < len(layers) - 1:
                x = activation(x)
        return x

    # -- network pieces ------------------------------------------------------
    def encode(self, x) -> Tensor:
        """d(x): every input-block layer is activated."""
        return self._mlp(as_tensor(x), "input", activate_last=True)

    def dynamics(self, h: Tensor, t: float) -> Tensor:
        """f(h, t): time enters as an extra input column; the last layer is linear."""
        if h.ndim == 1:
            time_column = Tensor(np.array([t]))
        else:
            time_column = Tensor(np.full((h.shape[0], 1), t))
        return self._mlp(concat([h, time_column], axis=-1), "node", activate_last=False)

    def head_logits(self, h: Tensor) -> Tensor:
        return self._mlp(h, "head", activate_last=False)

    def output(self, h: Tensor) -> Tensor:
        """g(h): class probabilities, or the scalar regression mean."""
        logits = self.head_logits(h)
        return softmax(logits, axis=-1) if self.spec.task == "classification" else logits

    # -- end-time machinery --------------------------------------------------
    def posterior_tensors(self) -> tuple[Tensor, Tensor]:
        if self.spec.variant != "lt_node":
            raise ContractError(f"global posterior is defined for lt_node, not {self.spec.variant}")
        return (positive_from_raw(self.parameters["end_time.alpha_raw"]),
                positive_from_raw(self.parameters["end_time.beta_raw"]))

    def posterior(self) -> GammaParams:
        with no_record():
            alpha, beta = self.posterior_tensors()
        return GammaParams(alpha.item(), beta.item())

    def inference_tensors(self, x) -> tuple[Tensor, Tensor]:
        """r(x; phi) -> (alpha_qi, beta_qi); vectors for a batch, scalars for one input."""
        if self.spec.variant != "alt_node":
            raise ContractError(f"inference network is defined for alt_node, not {self.spec.variant}")
        raw = self._mlp(as_tensor(x), "inference", activate_last=False)
        positive = positive_from_raw(raw)
        if positive.ndim == 1:
            return take(positive, 0), take(positive, 1)
        return take(positive, (slice(None), 0)), take(positive, (slice(None), 1))


def build_model(spec: ModelSpec, seed: int | np.random.SeedSequence, solver: SolverConfig | None = None) -> LatentTimeModel:
    """Fan-in uniform initialization on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = np.random.default_rng(seed)
    parameters: dict[str, Tensor] = {}

    def add_block(prefix: str, fan_in: int, widths: tuple[int, ...]):
        for index, (n_in, n_out) in enumerate(_layer_shapes(fan_in, widths)):
            bound = 1.0 / np.sqrt(n_in)
            parameters[f"{prefix}.{index}.weight"] = Tensor(
                rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, name=f"{prefix}.{index}.weight"
            )
            parameters[f"{prefix}.{index}.bias"] = Tensor(
                rng.uniform(-bound, bound, size=n_out), requires_grad=True, name=f"{prefix}.{index}.bias"
            )

    add_block("input", spec.input_dim, spec.input_block)
    add_block("node", spec.hidden_dim + 1, spec.node_block)
    add_block("head", spec.hidden_dim, spec.head)

    if spec.variant == "lt_node":
        alpha0, beta0 = spec.posterior_init
        parameters["end_time.alpha_raw"] = Tensor(raw_from_positive(alpha0), requires_grad=True, name="end_time.alpha_raw")
        parameters["end_time.beta_raw"] = Tensor(raw_from_positive(beta0), requires_grad=True, name="end_time.beta_raw")
    elif spec.variant == "alt_node":
        add_block("inference", spec.input_dim, spec.inference_block + (2,))

    model = LatentTimeModel(spec=spec, parameters=parameters, solver=solver or SolverConfig())
    logger.debug("built %s model with %d parameters", spec.variant, model.parameter_count())
    return model


def forward_at_times(model: LatentTimeModel, x, times, two_phase: bool = False) -> list[Tensor]:
    """
    Head outputs at each sorted time from a single integration. With
    two_phase=True the solve replays its accepted grid under recording.
    """
    h0 = model.encode(x)
    solver = two_phase_solve if two_phase else solve_at_times
    states = solver(model.dynamics, h0, times, model.solver)
    outputs: dict[int, Tensor] = {}
    return [outputs.setdefault(id(s), model.output(s)) for s in states]


def infer_endtime_posterior(model: LatentTimeModel, x) -> InferenceNetOutput:
    with no_record():
        alpha, beta = model.inference_tensors(x)
    return InferenceNetOutput(alpha_qi=alpha.values.copy(), beta_qi=beta.values.copy())


def sample_end_times(model: LatentTimeModel, x, S: int, rng: np.random.Generator) -> np.ndarray:
    """S draws from the variant's end-time law for a single input x (unsorted)."""
    if S < 1:
        raise ContractError(f"sample count must be >= 1, got {S}")
    variant = model.spec.variant
    if variant == "node":
        return np.full(S, model.spec.end_time)
    if variant == "uni_node":
        a, b = model.spec.uniform
        return uniform_sample(a, b, rng, S)
    if variant == "lt_node":
        return gamma_sample(model.posterior(), rng, S)
    q = infer_endtime_posterior(model, x)
    return gamma_sample(GammaParams(float(q.alpha_qi), float(q.beta_qi)), rng, S)


@dataclass
class PredictionEntry:
    times: np.ndarray      # sorted sampled end-times (S,)
    samples: np.ndarray    # (S, C) or (S,)
    mean: np.ndarray       # (C,) or scalar
    std: float | None = None


def _squeeze_regression(values: np.ndarray) -> np.ndarray:
    return values.reshape(values.shape[:-1])


def predict_from_times(model: LatentTimeModel, x, times: np.ndarray) -> PredictionEntry:
    times = np.sort(np.asarray(times, dtype=np.float64), kind="stable")
    with no_record():
        outputs = forward_at_times(model, x, times)
    samples = np.stack([o.values for o in outputs])
    if model.spec.task == "regression":
        samples = _squeeze_regression(samples)
        return PredictionEntry(times, samples, samples.mean(axis=0), float(samples.std(axis=0)))
    return PredictionEntry(times, samples, samples.mean(axis=0))


def predict_probability(model: LatentTimeModel, x, S: int, rng: np.random.Generator) -> PredictionEntry:
    """Draw S end-times, sort them, integrate once and average the S head outputs."""
    times = sample_end_times(model, np.asarray(x, dtype=np.float64), S, rng)
    return predict_from_times(model, x, times)


def _predict_batch(model: LatentTimeModel, inputs: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Union of every row's sorted times, one batched solve, per-row dense read-off."""
    n, S = times.shape
    with no_record():
        h0 = model.encode(inputs)
        trajectory = solve(model.dynamics, h0, 0.0, float(times.max()), model.solver)
        rows = np.repeat(np.arange(n), S)
        states = dense_eval_rows(trajectory, rows, times.reshape(-1))
        outputs = model.output(Tensor(states)).values
    return outputs.reshape(n, S, -1)


def predict_dataset(model: LatentTimeModel, inputs: np.ndarray, S: int, rng: np.random.Generator,
                    targets: np.ndarray | None = None, is_ood: np.ndarray | None = None,
                    batch_size: int = 256, threads: int = 1) -> PredictiveSet:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, model.spec.input_dim)
    n = inputs.shape[0]
    if S < 1:
        raise ContractError(f"sample count must be >= 1, got {S}")

    # times are drawn up front and in order so results do not depend on sharding
    if model.spec.variant == "alt_node":
        q = infer_endtime_posterior(model, inputs)
        times = np.stack([
            gamma_sample(GammaParams(float(a), float(b)), rng, S) for a, b in zip(q.alpha_qi, q.beta_qi)
        ]) if n else np.zeros((0, S))
    else:
        times = np.stack([sample_end_times(model, None, S, rng) for _ in range(n)]) if n else np.zeros((0, S))
    times = np.sort(times, axis=1, kind="stable")

    starts = list(range(0, n, batch_size))
    chunks = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_predict_batch)(model, inputs[i:i + batch_size], times[i:i + batch_size]) for i in starts
    )
    width = model.spec.head[-1]
    samples = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, S, width))

    std = None
    if model.spec.task == "regression":
        samples = _squeeze_regression(samples)
        std = samples.std(axis=1)
    return PredictiveSet(
        task=model.spec.task, samples=samples, mean=samples.mean(axis=1), std=std,
        targets=None if targets is None else np.asarray(targets), times=times,
        is_ood=None if is_ood is None else np.asarray(is_ood, dtype=bool),
        metadata={"variant": model.spec.variant, "samples_per_input": S},
    )

