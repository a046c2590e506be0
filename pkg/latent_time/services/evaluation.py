"""
Uncertainty and calibration metrics over a PredictiveSet.

All functions are pure; curve outputs are pandas DataFrames so that the
experiment runner can write them straight to headered CSV.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from latent_time.exceptions import ContractError
from latent_time.services.data_generator import rotate_inputs

STD_FLOOR = 1e-6
HISTOGRAM_BINS = 20


@dataclass
class PredictiveSet:
    """
    Per-example end-time ensembles.

    classification: samples (N, S, C), mean (N, C)
    regression:     samples (N, S),    mean (N,), std (N,)
    """

    task: str
    samples: np.ndarray
    mean: np.ndarray
    std: np.ndarray | None = None
    targets: np.ndarray | None = None
    times: np.ndarray | None = None
    is_ood: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.mean.shape[0]
        for name in ("samples", "std", "targets", "times", "is_ood"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != n:
                raise ContractError(f"PredictiveSet.{name} has {value.shape[0]} rows, expected {n}")
        if self.task == "classification":
            if self.mean.ndim != 2:
                raise ContractError(f"classification means must be (N, C), got {self.mean.shape}")
            if n and (np.any(self.mean < 0.0) or np.any(np.abs(self.mean.sum(axis=1) - 1.0) > 1e-6)):
                raise ContractError("classification means must be probability vectors")
        elif self.task == "regression":
            if self.std is not None and np.any(self.std < 0.0):
                raise ContractError("regression std must be nonnegative")
        else:
            raise ContractError(f"unknown task {self.task!r}")

    def __len__(self):
        return int(self.mean.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.mean.shape[1])

    def subset(self, mask) -> "PredictiveSet":
        def pick(value):
            return None if value is None else value[mask]

        return PredictiveSet(
            task=self.task, samples=self.samples[mask], mean=self.mean[mask], std=pick(self.std),
            targets=pick(self.targets), times=pick(self.times), is_ood=pick(self.is_ood),
            metadata=dict(self.metadata),
        )

    @classmethod
    def concatenate(cls, parts: Sequence["PredictiveSet"]) -> "PredictiveSet":
        if not parts:
            raise ContractError("nothing to concatenate")

        def join(name):
            values = [getattr(p, name) for p in parts]
            if any(v is None for v in values):
                return None
            return np.concatenate(values, axis=0)

        return cls(
            task=parts[0].task, samples=join("samples"), mean=join("mean"), std=join("std"),
            targets=join("targets"), times=join("times"), is_ood=join("is_ood"),
            metadata=dict(parts[0].metadata),
        )


@dataclass(frozen=True)
class BinningConfig:
    num_bins: int = 10

    def __post_init__(self):
        if self.num_bins < 1:
            raise ContractError(f"num_bins must be >= 1, got {self.num_bins}")

    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.num_bins + 1)

    def assign(self, confidence: np.ndarray) -> np.ndarray:
        """Bin k holds (edge_k, edge_k+1]; zero confidence falls in bin 0."""
        index = np.searchsorted(self.edges(), confidence, side="left") - 1
        return np.clip(index, 0, self.num_bins - 1)


def _require_classification(pred: PredictiveSet):
    if pred.task != "classification":
        raise ContractError("classification metrics need a classification PredictiveSet")
    if len(pred) == 0:
        raise ContractError("metrics need at least one example")
    if pred.targets is None:
        raise ContractError("metrics need targets")


def _labels(pred: PredictiveSet) -> np.ndarray:
    targets = np.asarray(pred.targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= pred.num_classes):
        raise ContractError(f"target classes must lie in [0, {pred.num_classes})")
    return targets


def expected_calibration_error(probs: np.ndarray, targets: np.ndarray, bins: BinningConfig) -> float:
    confidence = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == targets).astype(np.float64)
    index = bins.assign(confidence)
    n = len(confidence)
    ece = 0.0
    for b in range(bins.num_bins):
        members = index == b
        count = int(members.sum())
        if count:
            ece += (count / n) * abs(confidence[members].mean() - correct[members].mean())
    return float(ece)


def brier_score(probs: np.ndarray, targets: np.ndarray) -> float:
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(targets)), targets] = 1.0
    return float(np.mean(np.mean((probs - onehot) ** 2, axis=1)))


def classification_metrics(pred: PredictiveSet, bins: BinningConfig | None = None) -> dict:
    _require_classification(pred)
    bins = bins or BinningConfig()
    targets = _labels(pred)
    probs = pred.mean
    picked = probs[np.arange(len(targets)), targets]
    return {
        "error": float(np.mean(probs.argmax(axis=1) != targets)),
        "log_likelihood": float(np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny)))),
        "brier": brier_score(probs, targets),
        "ece": expected_calibration_error(probs, targets, bins),
    }


def _check_normalized(probs: np.ndarray):
    if np.any(probs < 0.0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("entropy needs normalized, nonnegative probability vectors")


def entropies(probs) -> np.ndarray:
    """Row-wise categorical entropy with 0 ln 0 = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_normalized(probs)
    safe = np.where(probs > 0.0, probs, 1.0)
    return -np.sum(np.where(probs > 0.0, probs * np.log(safe), 0.0), axis=-1)


def entropy_categorical(prob) -> float:
    return float(entropies(np.asarray(prob, dtype=np.float64).reshape(1, -1))[0])


def differential_entropy(std) -> np.ndarray:
    std = np.maximum(np.asarray(std, dtype=np.float64), STD_FLOOR)
    return 0.5 * np.log(2.0 * math.pi * math.e * std * std)


def regression_uncertainty(pred: PredictiveSet, interval: tuple[float, float], inputs) -> dict:
    if pred.task != "regression":
        raise ContractError("regression_uncertainty needs a regression PredictiveSet")
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1)
    if inputs.shape[0] != len(pred):
        raise ContractError(f"{inputs.shape[0]} inputs for {len(pred)} predictions")
    lo, hi = interval
    inside = (inputs > lo) & (inputs < hi)
    if not np.any(inside):
        raise ContractError(f"no inputs inside the interval ({lo}, {hi})")
    std = pred.std if pred.std is not None else pred.samples.std(axis=1)
    entropy = differential_entropy(std)
    return {
        "mean": pred.mean,
        "std": std,
        "entropy": entropy,
        "average_entropy": float(entropy[inside].mean()),
        "average_std": float(std[inside].mean()),
        "std_floor": STD_FLOOR,
    }


def regression_region_summary(pred: PredictiveSet, inputs, interval=(-0.5, 0.5),
                              clusters=((-1.0, -0.5), (0.5, 1.0)), away=(-1.5, 1.5)) -> dict:
    """Average std and entropy inside the gap, on the training clusters, and at the away-data points."""
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1)
    std = pred.std if pred.std is not None else pred.samples.std(axis=1)
    entropy = differential_entropy(std)
    gap = (inputs > interval[0]) & (inputs < interval[1])
    on_clusters = np.zeros_like(gap)
    for lo, hi in clusters:
        on_clusters |= (inputs >= lo) & (inputs <= hi)
    nearest = [int(np.argmin(np.abs(inputs - a))) for a in away]
    if not np.any(gap) or not np.any(on_clusters):
        raise ContractError("input grid must cover both the interval and the clusters")
    return {
        "interval_std": float(std[gap].mean()),
        "interval_entropy": float(entropy[gap].mean()),
        "cluster_std": float(std[on_clusters].mean()),
        "cluster_entropy": float(entropy[on_clusters].mean()),
        "away_std": float(std[nearest].mean()),
        "away_entropy": float(entropy[nearest].mean()),
        "std_floor": STD_FLOOR,
    }


def auroc_aupr(in_scores, out_scores) -> dict:
    """Higher score means more out-of-distribution."""
    in_scores = np.asarray(in_scores, dtype=np.float64).reshape(-1)
    out_scores = np.asarray(out_scores, dtype=np.float64).reshape(-1)
    if in_scores.size == 0 or out_scores.size == 0:
        raise ContractError("both in- and out-of-distribution scores are required")
    scores = np.concatenate([in_scores, out_scores])
    labels = np.r_[np.zeros(in_scores.size), np.ones(out_scores.size)]
    return {
        "auroc": float(roc_auc_score(labels, scores)),
        "aupr_in": float(average_precision_score(1.0 - labels, -scores)),
        "aupr_out": float(average_precision_score(labels, scores)),
    }


def rejection_and_confidence_curves(pred: PredictiveSet, fractions: Sequence[float],
                                    thresholds: Sequence[float]) -> dict[str, pd.DataFrame]:
    """
    OOD examples (pred.is_ood) always count as errors. Rejection removes the
    highest-entropy examples first.
    """
    if pred.task != "classification" or len(pred) == 0:
        raise ContractError("curves need a nonempty classification PredictiveSet")
    n = len(pred)
    is_ood = np.zeros(n, dtype=bool) if pred.is_ood is None else np.asarray(pred.is_ood, dtype=bool)
    targets = np.asarray(pred.targets if pred.targets is not None else np.full(n, -1), dtype=np.int64)
    correct = (pred.mean.argmax(axis=1) == targets) & ~is_ood
    entropy = entropies(pred.mean)
    confidence = pred.mean.max(axis=1)

    order = np.argsort(-entropy, kind="stable")
    rows = []
    for f in fractions:
        if not 0.0 <= f < 1.0:
            raise ContractError(f"rejection fractions must lie in [0, 1), got {f}")
        k = int(math.floor(f * n + 1e-9))
        rows.append({"rejected_fraction": float(f), "accuracy": float(correct[order[k:]].mean())})
    rejection = pd.DataFrame(rows, columns=["rejected_fraction", "accuracy"])

    rows = []
    for tau in thresholds:
        kept = confidence >= tau
        count = int(kept.sum())
        rows.append({
            "threshold": float(tau),
            "accuracy": float(correct[kept].mean()) if count else float("nan"),
            "count": count,
        })
    confidence_curve = pd.DataFrame(rows, columns=["threshold", "accuracy", "count"])

    top = math.log(pred.num_classes)
    edges = np.linspace(0.0, top, HISTOGRAM_BINS + 1)
    clipped = np.clip(entropy, 0.0, top)
    id_counts, _ = np.histogram(clipped[~is_ood], bins=edges)
    ood_counts, _ = np.histogram(clipped[is_ood], bins=edges)
    histogram = pd.DataFrame({
        "bin_lo": edges[:-1], "bin_hi": edges[1:], "id_count": id_counts, "ood_count": ood_counts,
    })
    return {"rejection": rejection, "confidence": confidence_curve, "entropy_histogram": histogram}


def rotation_sweep(predict: Callable[[np.ndarray], PredictiveSet], inputs: np.ndarray, targets: np.ndarray,
                   angles_deg: Sequence[float], tau: float = 0.9) -> pd.DataFrame:
    """Error, mean entropy, mean confidence and confident-count of `predict` on rotated 2-D inputs."""
    rows = []
    for angle in angles_deg:
        pred = predict(rotate_inputs(inputs, angle))
        probs = pred.mean
        confidence = probs.max(axis=1)
        rows.append({
            "angle": float(angle),
            "error": float(np.mean(probs.argmax(axis=1) != targets)),
            "mean_entropy": float(entropies(probs).mean()),
            "mean_confidence": float(confidence.mean()),
            "confident_count": int(np.sum(confidence >= tau)),
        })
    return pd.DataFrame(rows, columns=["angle", "error", "mean_entropy", "mean_confidence", "confident_count"])
