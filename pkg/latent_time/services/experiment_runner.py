"""
Experiment actions behind `manage.py run_experiment`.

Every action takes a validated ExperimentConfig and an output directory and
returns a small summary dict. All randomness comes from one SeedSequence
split into named streams, so rerunning an action with the same config and
seed reproduces its artifacts byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import joblib
import numpy as np
import pandas as pd
from django.conf import settings

from latent_time import __version__
from latent_time.exceptions import ContractError
from latent_time.services import oracles
from latent_time.services.attacks import fgsm_sweep
from latent_time.services.autodiff import Tape, Tensor, backward_gradients, matmul, reduce_sum, squared_error, tanh
from latent_time.services.data_generator import (
    Dataset, gen_ood_inputs, generate, input_grid, load_csv,
)
from latent_time.services.evaluation import (
    BinningConfig, PredictiveSet, auroc_aupr, brier_score, classification_metrics, entropies,
    expected_calibration_error, regression_region_summary, regression_uncertainty,
    rejection_and_confidence_curves, rotation_sweep,
)
from latent_time.services.experiment_config import ExperimentConfig
from latent_time.services.gamma_dist import GammaParams, gamma_kl, gamma_pdf_array
from latent_time.services.ml.checkpoint import load_checkpoint, save_checkpoint
from latent_time.services.ml.latent_time_model import (
    LatentTimeModel, ModelSpec, build_model, infer_endtime_posterior, predict_dataset, predict_from_times,
)
from latent_time.services.ml.training import train
from latent_time.services.ode_solver import SolverConfig, two_phase_solve

logger = logging.getLogger(__name__)

STREAMS = ("init", "sampling", "data", "eval", "attack")
REQUIRED_ARTIFACTS = ("manifest.json", "checkpoint.bin", "loss_trace.csv", "metrics.json")
ACTIONS = ("train", "eval", "attack", "posterior-report", "report", "schema", "verify")


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()


def json_safe(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", float_format="%.17g")
    return path


def read_manifest(out: Path) -> dict:
    path = Path(out) / "manifest.json"
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        logger.warning("ignoring unreadable manifest at %s", path)
        return {}


def write_manifest(out: Path, cfg: ExperimentConfig, action: str, artifacts: list[str]) -> Path:
    """
    The top level describes the latest action; `actions` keeps the newest entry
    of every action run into this directory.
    """
    entry = {
        "action": action,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "library_version": __version__,
        "artifacts": sorted(artifacts),
    }
    actions = dict(read_manifest(out).get("actions") or {})
    actions[action] = entry
    return write_json(out / "manifest.json", {**entry, "actions": actions})


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.dataset
    if spec.generator == "csv":
        return load_csv(spec.csv_path, task=cfg.model.task, num_classes=spec.num_classes or cfg.model.num_classes)
    data_seed = int(np.random.default_rng(seed_streams(cfg.seed)["data"]).integers(2 ** 31 - 1))
    return generate(spec.generator, seed=data_seed, **spec.params)


def _split(dataset: Dataset, name: str) -> Dataset:
    part = dataset.subset(name)
    return part if len(part) else dataset


def _threads() -> int:
    return int(getattr(settings, "LTNODE_THREADS", 1))


def _load_model(cfg: ExperimentConfig, out: Path) -> tuple[LatentTimeModel, dict]:
    model, header = load_checkpoint(out / "checkpoint.bin", expected_spec=cfg.model)
    model.solver = cfg.solver
    return model, header


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------
def run_train(cfg: ExperimentConfig, out: Path) -> dict:
    streams = seed_streams(cfg.seed)
    dataset = load_dataset(cfg)
    train_set = _split(dataset, "train")
    model = build_model(cfg.model, streams["init"], solver=cfg.solver)
    sampling = np.random.default_rng(streams["sampling"])

    logger.info("training %s on %d examples for %d iterations", cfg.model.variant, len(train_set),
                cfg.training.iterations)
    result = train(model, train_set.inputs, train_set.targets, cfg.training, rng=sampling)

    write_csv(out / "loss_trace.csv", result.trace)
    save_checkpoint(model, out / "checkpoint.bin", iteration=result.final_iteration, rng_digest=rng_digest(sampling))
    summary = {
        "variant": cfg.model.variant,
        "iterations": result.final_iteration,
        "parameters": model.parameter_count(),
    }
    if len(result.trace):
        summary["final_loss"] = float(result.trace.iloc[-1, 1])
    if cfg.model.variant == "lt_node":
        summary["posterior"] = model.posterior().as_dict()
    write_json(out / "training.json", summary)
    write_manifest(out, cfg, "train", ["loss_trace.csv", "checkpoint.bin", "training.json"])
    return summary


def default_ood_shift(reference: Dataset) -> np.ndarray:
    """Five data radii along the first input axis."""
    centered = reference.inputs - reference.inputs.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centered, axis=1))) if len(reference) else 1.0
    shift = np.zeros(reference.input_dim)
    shift[0] = 5.0 * radius
    return shift


def _evaluate_classification(cfg: ExperimentConfig, model: LatentTimeModel, dataset: Dataset,
                             rng: np.random.Generator, out: Path) -> tuple[dict, list[str], dict]:
    ev = cfg.evaluation
    test_set = _split(dataset, "test")
    train_set = _split(dataset, "train")
    pred = predict_dataset(model, test_set.inputs, ev.samples, rng, targets=test_set.targets,
                           batch_size=ev.batch_size, threads=_threads())
    metrics = {"classification": classification_metrics(pred, BinningConfig(ev.num_bins))}
    artifacts = []
    dumps = {"id": pred}

    if cfg.dataset.ood_n > 0:
        shift = np.array(cfg.dataset.ood_shift) if cfg.dataset.ood_shift else default_ood_shift(train_set)
        ood_seed = int(rng.integers(2 ** 31 - 1))
        ood_inputs = gen_ood_inputs(train_set, shift, cfg.dataset.ood_scale, cfg.dataset.ood_n, seed=ood_seed)
        ood = predict_dataset(model, ood_inputs, ev.samples, rng, targets=np.full(len(ood_inputs), -1),
                              is_ood=np.ones(len(ood_inputs), dtype=bool), batch_size=ev.batch_size,
                              threads=_threads())
        dumps["ood"] = ood
        id_entropy, ood_entropy = entropies(pred.mean), entropies(ood.mean)
        metrics["ood"] = {
            **auroc_aupr(id_entropy, ood_entropy),
            "mean_entropy_id": float(id_entropy.mean()),
            "mean_entropy_ood": float(ood_entropy.mean()),
        }
        pred.is_ood = np.zeros(len(pred), dtype=bool)
        mixed = PredictiveSet.concatenate([pred, ood])
    else:
        mixed = pred

    curves = rejection_and_confidence_curves(mixed, ev.rejection_fractions, ev.confidence_thresholds)
    for name, frame in curves.items():
        write_csv(out / f"{name}.csv", frame)
        artifacts.append(f"{name}.csv")

    if ev.rotation_angles and test_set.input_dim == 2:
        def predict(rotated):
            return predict_dataset(model, rotated, ev.samples, rng, batch_size=ev.batch_size, threads=_threads())

        write_csv(out / "rotation.csv",
                  rotation_sweep(predict, test_set.inputs, test_set.targets, ev.rotation_angles, ev.rotation_tau))
        artifacts.append("rotation.csv")
    return metrics, artifacts, dumps


def _evaluate_regression(cfg: ExperimentConfig, model: LatentTimeModel, dataset: Dataset,
                         rng: np.random.Generator, out: Path) -> tuple[dict, list[str], dict]:
    ev = cfg.evaluation
    lo, hi, n = ev.grid
    grid = input_grid(lo, hi, n)
    pred = predict_dataset(model, grid, ev.samples, rng, batch_size=ev.batch_size, threads=_threads())
    uncertainty = regression_uncertainty(pred, ev.ood_interval, grid)
    regions = regression_region_summary(pred, grid, interval=ev.ood_interval)

    train_set = _split(dataset, "train")
    fit = predict_dataset(model, train_set.inputs, ev.samples, rng, targets=train_set.targets,
                          batch_size=ev.batch_size, threads=_threads())
    rmse = float(np.sqrt(np.mean((fit.mean - train_set.targets) ** 2)))

    write_csv(out / "regression_curve.csv", pd.DataFrame({
        "x": grid.reshape(-1), "mean": uncertainty["mean"], "std": uncertainty["std"],
        "entropy": uncertainty["entropy"],
    }))
    metrics = {
        "regression": {
            "average_entropy_in_interval": uncertainty["average_entropy"],
            "average_std_in_interval": uncertainty["average_std"],
            "train_rmse": rmse,
            **regions,
        }
    }
    return metrics, ["regression_curve.csv"], {"grid": pred, "train": fit}


def run_eval(cfg: ExperimentConfig, out: Path) -> dict:
    model, _ = _load_model(cfg, out)
    dataset = load_dataset(cfg)
    rng = np.random.default_rng(seed_streams(cfg.seed)["eval"])
    if cfg.model.task == "classification":
        metrics, artifacts, dumps = _evaluate_classification(cfg, model, dataset, rng, out)
    else:
        metrics, artifacts, dumps = _evaluate_regression(cfg, model, dataset, rng, out)
    if cfg.model.variant == "lt_node":
        metrics["posterior"] = model.posterior().as_dict()

    write_json(out / "metrics.json", metrics)
    joblib.dump(dumps, out / "predictive_set.joblib")
    write_manifest(out, cfg, "eval", artifacts + ["metrics.json", "predictive_set.joblib"])
    return metrics


def run_attack(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.model.task != "classification":
        raise ContractError("the attack action needs a classification model")
    model, _ = _load_model(cfg, out)
    test_set = _split(load_dataset(cfg), "test")
    limit = cfg.attack.max_examples or len(test_set)
    rng = np.random.default_rng(seed_streams(cfg.seed)["attack"])
    table = fgsm_sweep(model, test_set.inputs[:limit], test_set.targets[:limit], cfg.attack, rng)
    write_csv(out / "fgsm_sweep.csv", table)
    write_manifest(out, cfg, "attack", ["fgsm_sweep.csv"])
    return {"epsilons": table["epsilon"].tolist(), "error": table["error"].tolist()}


def density_on_grid(t: np.ndarray, params: GammaParams) -> np.ndarray:
    """Gamma pdf on t >= 0, with the t = 0 limit filled in."""
    values = np.empty_like(t)
    positive = t > 0.0
    values[positive] = gamma_pdf_array(t[positive], params)
    if params.alpha > 1.0:
        at_zero = 0.0
    elif params.alpha == 1.0:
        at_zero = params.beta
    else:
        at_zero = math.inf
    values[~positive] = at_zero
    return values


def run_posterior_report(cfg: ExperimentConfig, out: Path) -> dict:
    model, _ = _load_model(cfg, out)
    prior = cfg.training.prior
    t = np.linspace(0.0, cfg.posterior_report.t_max, cfg.posterior_report.points)

    if cfg.model.variant == "lt_node":
        posterior = model.posterior()
        posterior_pdf = density_on_grid(t, posterior)
        summary = {"posterior": {**posterior.as_dict(), "mean": posterior.mean, "mode": posterior.mode,
                                 "kl_to_prior": gamma_kl(posterior, prior)}}
    elif cfg.model.variant == "alt_node":
        inputs = _split(load_dataset(cfg), "train").inputs
        q = infer_endtime_posterior(model, inputs)
        posterior_pdf = np.mean(
            [density_on_grid(t, GammaParams(float(a), float(b))) for a, b in zip(q.alpha_qi, q.beta_qi)], axis=0
        )
        summary = {"posterior": {"mean_alpha": float(q.alpha_qi.mean()), "mean_beta": float(q.beta_qi.mean()),
                                 "mean_of_means": float(np.mean(q.alpha_qi / q.beta_qi))}}
    else:
        raise ContractError(f"posterior-report needs lt_node or alt_node, got {cfg.model.variant}")

    summary["prior"] = {**prior.as_dict(), "mean": prior.mean, "mode": prior.mode}
    write_csv(out / "posterior.csv", pd.DataFrame({
        "t": t, "prior_pdf": density_on_grid(t, prior), "posterior_pdf": posterior_pdf,
    }))
    write_json(out / "posterior.json", summary)
    write_manifest(out, cfg, "posterior-report", ["posterior.csv", "posterior.json"])
    return summary


def emit_report(out: Path) -> tuple[dict, list[str]]:
    """Consolidated summary of a run directory; returns (summary, missing artifacts)."""
    out = Path(out)
    missing = [name for name in REQUIRED_ARTIFACTS if not (out / name).exists()]
    summary: dict = {"missing": missing}

    metrics = {}
    for name in ("metrics.json", "training.json", "posterior.json"):
        path = out / name
        if path.exists():
            metrics[path.stem] = json.loads(path.read_text(encoding="utf-8"))
    if metrics:
        summary["metrics"] = metrics
    actions = read_manifest(out).get("actions")
    if actions:
        summary["provenance"] = actions
    curves = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.csv")) if out.exists() else []
    if curves:
        summary["curves"] = curves
    if out.exists():
        write_json(out / "summary.json", summary)
    return summary, missing


# ---------------------------------------------------------------------------
# oracle battery
# ---------------------------------------------------------------------------
def _relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def run_verify(cfg: ExperimentConfig, out: Path) -> tuple[dict, bool]:
    rng = np.random.default_rng(cfg.seed)
    checks = {}

    worst = 0.0
    for _ in range(10):
        q = GammaParams(*rng.uniform(0.5, 10.0, size=2))
        p = GammaParams(*rng.uniform(0.5, 10.0, size=2))
        worst = max(worst, abs(gamma_kl(q, p) - oracles.kl_by_quadrature(q.alpha, q.beta, p.alpha, p.beta)))
    checks["gamma_kl_vs_quadrature"] = {"max_abs_error": worst, "passed": worst <= 1e-6}

    x = rng.standard_normal((4, 3))
    w_values = rng.standard_normal((3, 2))

    def loss_of(values):
        return float(np.sum((np.tanh(x @ values)) ** 2))

    w = Tensor(w_values.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        loss = reduce_sum(squared_error(tanh(matmul(Tensor(x), w)), 0.0))
    backward_gradients(loss, tape)
    error = _relative_error(w.grad, oracles.finite_diff_grad(loss_of, w_values))
    checks["autodiff_vs_finite_differences"] = {"max_relative_error": error, "passed": error <= 1e-4}

    a = rng.standard_normal((2, 2))
    h0 = Tensor(rng.standard_normal(2), requires_grad=True)
    seed = rng.standard_normal(2)
    tight = SolverConfig(atol=1e-10, rtol=1e-10)
    tape = Tape()
    with tape:
        (state,) = two_phase_solve(lambda h, t: matmul(Tensor(a), h), h0, [1.0], tight)
        objective = reduce_sum(state * Tensor(seed))
    backward_gradients(objective, tape)
    error = _relative_error(h0.grad, oracles.linear_ode_h0_gradient(a, 1.0, seed))
    checks["two_phase_vs_matrix_exponential"] = {"max_relative_error": error, "passed": error <= 1e-5}

    spec = ModelSpec(input_dim=2, input_block=(8,), node_block=(8, 8), head=(3,), task="classification",
                     num_classes=3, variant="lt_node", activation="tanh")
    model = build_model(spec, int(rng.integers(2 ** 31 - 1)), solver=SolverConfig(atol=1e-4, rtol=1e-4))
    point = rng.standard_normal(2)
    times = np.sort(rng.uniform(0.1, 3.0, size=10))
    single_pass = predict_from_times(model, point, times).samples
    independent = np.stack(oracles.reference_predict(model, point, times))
    error = float(np.max(np.abs(single_pass - independent)))
    checks["single_pass_vs_independent_solves"] = {"max_abs_error": error, "passed": error <= 1e-3}

    probs = rng.dirichlet(np.ones(4), size=50)
    targets = rng.integers(0, 4, size=50)
    bins = BinningConfig()
    error = max(
        abs(expected_calibration_error(probs, targets, bins) - oracles.ece_bruteforce(probs, targets)),
        abs(brier_score(probs, targets) - oracles.brier_bruteforce(probs, targets)),
    )
    in_scores, out_scores = rng.random(30), rng.random(30) + 0.2
    ranking = auroc_aupr(in_scores, out_scores)
    error = max(error, abs(ranking["auroc"] - oracles.auroc_pair_counting(in_scores, out_scores)))
    labels = np.r_[np.zeros(30), np.ones(30)]
    error = max(error, abs(ranking["aupr_out"] - oracles.aupr_bruteforce(labels, np.r_[in_scores, out_scores])))
    checks["metrics_vs_bruteforce"] = {"max_abs_error": error, "passed": error <= 1e-12}

    passed = all(check["passed"] for check in checks.values())
    write_json(out / "verify.json", {"checks": checks, "passed": passed})
    write_manifest(out, cfg, "verify", ["verify.json"])
    return checks, passed


RUNNERS = {
    "train": run_train,
    "eval": run_eval,
    "attack": run_attack,
    "posterior-report": run_posterior_report,
}
