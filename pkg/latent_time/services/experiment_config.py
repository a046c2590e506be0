from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from latent_time.exceptions import ConfigError, ContractError, DomainError
from latent_time.forms import SECTION_FORMS, RunForm, validate_section
from latent_time.services.attacks import AttackConfig
from latent_time.services.gamma_dist import GammaParams
from latent_time.services.ml.latent_time_model import ModelSpec
from latent_time.services.ml.training import ElboConfig, OptimizerSettings
from latent_time.services.ode_solver import SolverConfig

DATASET_DEFAULTS = {
    "foong1d": {"n": 1500, "noise_std": 0.02},
    "two_moons": {"n": 1000, "noise_std": 0.1, "test_fraction": 0.3},
}


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "foong1d"
    params: dict = field(default_factory=dict)
    csv_path: str | None = None
    num_classes: int | None = None
    ood_shift: tuple[float, ...] | None = None
    ood_scale: float = 0.25
    ood_n: int = 200


@dataclass(frozen=True)
class EvaluationConfig:
    samples: int = 10
    num_bins: int = 10
    batch_size: int = 256
    rejection_fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    confidence_thresholds: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    rotation_angles: tuple[float, ...] = ()
    rotation_tau: float = 0.9
    ood_interval: tuple[float, float] = (-0.5, 0.5)
    grid: tuple[float, float, int] = (-2.0, 2.0, 401)


@dataclass(frozen=True)
class PosteriorReportConfig:
    t_max: float = 6.0
    points: int = 601


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    model: ModelSpec
    dataset: DatasetSpec
    solver: SolverConfig
    training: ElboConfig
    evaluation: EvaluationConfig
    attack: AttackConfig
    posterior_report: PosteriorReportConfig
    config_hash: str
    raw: dict = field(default_factory=dict, compare=False)


def canonical_hash(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _model_spec(data: dict, dataset: DatasetSpec) -> ModelSpec:
    variant = data["variant"]
    extra = {
        "end_time": data["end_time"],
        "uniform": (data["uniform_a"], data["uniform_b"]),
        "posterior_init": (data["posterior_alpha"], data["posterior_beta"]),
    }
    if data["inference_block"]:
        extra["inference_block"] = tuple(data["inference_block"])

    if data["preset"] == "regression":
        base = ModelSpec.regression_default(variant)
    elif data["preset"] == "classifier":
        num_classes = data["num_classes"] or dataset.num_classes or 2
        base = ModelSpec.classifier_default(num_classes=num_classes, input_dim=data["input_dim"] or 2, variant=variant)
    else:
        base = None

    fields = base.to_dict() if base is not None else {
        "input_dim": data["input_dim"], "task": data["task"], "num_classes": data["num_classes"], "variant": variant,
    }
    for name in ("input_block", "node_block", "head"):
        if data[name]:
            fields[name] = tuple(data[name])
    if data["activation"]:
        fields["activation"] = data["activation"]
    fields.update(extra)
    return ModelSpec(**fields)


def _dataset_spec(data: dict) -> DatasetSpec:
    generator = data["generator"]
    params = dict(DATASET_DEFAULTS.get(generator, {}))
    for name in ("n", "noise_std", "test_fraction"):
        if data.get(name) is not None and (generator != "foong1d" or name != "test_fraction"):
            params[name] = data[name]
    if generator == "csv":
        params = {}
    return DatasetSpec(
        generator=generator, params=params, csv_path=data.get("csv_path") or None,
        num_classes=data.get("num_classes"), ood_shift=tuple(data["ood_shift"]) if data.get("ood_shift") else None,
        ood_scale=data["ood_scale"], ood_n=data["ood_n"],
    )


def _training(data: dict, seed: int) -> ElboConfig:
    return ElboConfig(
        prior=GammaParams(data["prior_alpha"], data["prior_beta"]),
        grid=(data["grid_a"], data["grid_b"]),
        samples=data["samples"],
        iterations=data["iterations"],
        batch_size=data["batch_size"],
        kl_weight=data["kl_weight"],
        network=OptimizerSettings(data["learning_rate"], data["momentum"], data["weight_decay"]),
        variational=OptimizerSettings(data["variational_learning_rate"], data["momentum"], data["variational_weight_decay"]),
        inference=OptimizerSettings(data["inference_learning_rate"], data["momentum"], data["inference_weight_decay"]),
        milestones=tuple(data["milestones"]),
        seed=seed,
    )


def build_experiment_config(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "must be a JSON object")
    allowed = set(SECTION_FORMS) | {"seed", "output_dir"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown section")

    run = validate_section("", RunForm, {k: raw[k] for k in ("seed", "output_dir") if k in raw})
    seed = run["seed"] if seed_override is None else seed_override
    sections = {name: validate_section(name, form, raw.get(name)) for name, form in SECTION_FORMS.items()}

    try:
        dataset = _dataset_spec(sections["dataset"])
        model = _model_spec(sections["model"], dataset)
    except (ContractError, DomainError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("model", str(exc)) from exc
    if dataset.generator == "foong1d" and model.task != "regression":
        raise ConfigError("model.preset", "foong1d is a regression dataset")
    if dataset.generator == "two_moons" and model.task != "classification":
        raise ConfigError("model.preset", "two_moons is a classification dataset")

    try:
        solver = SolverConfig(**sections["solver"])
    except ContractError as exc:
        raise ConfigError("solver", str(exc)) from exc
    try:
        training = _training(sections["training"], seed)
    except (ContractError, DomainError) as exc:
        raise ConfigError("training", str(exc)) from exc

    ev = sections["evaluation"]
    evaluation = EvaluationConfig(
        samples=ev["samples"], num_bins=ev["num_bins"], batch_size=ev["batch_size"],
        rejection_fractions=tuple(ev["rejection_fractions"]),
        confidence_thresholds=tuple(ev["confidence_thresholds"]),
        rotation_angles=tuple(ev["rotation_angles"]), rotation_tau=ev["rotation_tau"],
        ood_interval=tuple(ev["ood_interval"]), grid=(ev["grid_lo"], ev["grid_hi"], ev["grid_points"]),
    )
    at = sections["attack"]
    try:
        attack = AttackConfig(
            epsilons=tuple(at["epsilons"]), samples=at["samples"], max_examples=at["max_examples"],
            clip=(at["clip_lo"], at["clip_hi"]) if at["clip_lo"] is not None else None,
        )
    except ContractError as exc:
        raise ConfigError("attack", str(exc)) from exc
    pr = sections["posterior_report"]

    return ExperimentConfig(
        seed=seed,
        output_dir=run["output_dir"],
        model=model,
        dataset=dataset,
        solver=solver,
        training=training,
        evaluation=evaluation,
        attack=attack,
        posterior_report=PosteriorReportConfig(t_max=pr["t_max"], points=pr["points"]),
        config_hash=canonical_hash(raw),
        raw=raw,
    )


def load_experiment_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    """Read and validate a JSON config; OSError propagates for unreadable files."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return build_experiment_config(raw, seed_override)
