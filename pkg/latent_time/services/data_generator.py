from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons
from sklearn.model_selection import train_test_split

from latent_time.exceptions import ContractError


@dataclass
class Dataset:
    inputs: np.ndarray          # (N, D)
    targets: np.ndarray         # (N,) floats for regression, class indices for classification
    task: str
    num_classes: int | None = None
    split: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(-1, 1)
        n = self.inputs.shape[0]
        if self.task == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
            if self.num_classes is None or self.num_classes < 2:
                raise ContractError("classification datasets need num_classes >= 2")
            if np.any(self.targets < 0) or np.any(self.targets >= self.num_classes):
                raise ContractError(f"class indices must lie in [0, {self.num_classes})")
        elif self.task == "regression":
            self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        else:
            raise ContractError(f"unknown task {self.task!r}")
        if self.split is None:
            self.split = np.full(n, "train", dtype=object)
        self.split = np.asarray(self.split, dtype=object)
        if self.targets.shape[0] != n or self.split.shape[0] != n:
            raise ContractError(
                f"row counts disagree: inputs {n}, targets {self.targets.shape[0]}, split {self.split.shape[0]}"
            )

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, split: str) -> "Dataset":
        mask = self.split == split
        return Dataset(
            inputs=self.inputs[mask], targets=self.targets[mask], task=self.task,
            num_classes=self.num_classes, split=self.split[mask], metadata=dict(self.metadata),
        )


def foong_target(x: np.ndarray) -> np.ndarray:
    return x + 0.3 * np.sin(2.0 * np.pi * x) + 0.3 * np.sin(4.0 * np.pi * x)


def gen_foong1d(n: int = 1500, noise_std: float = 0.02, seed: int = 0) -> Dataset:
    """Two clusters on [-1, -0.5] and [0.5, 1] flanking the gap (-0.5, 0.5)."""
    if n < 2:
        raise ContractError(f"gen_foong1d needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    left = rng.uniform(-1.0, -0.5, size=n // 2)
    right = rng.uniform(0.5, 1.0, size=n - n // 2)
    x = np.concatenate([left, right])
    y = foong_target(x)
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, size=n)
    return Dataset(
        inputs=x.reshape(-1, 1), targets=y, task="regression",
        metadata={
            "generator": "foong1d", "seed": seed, "n": n, "noise_std": noise_std,
            "target": "x + 0.3 sin(2 pi x) + 0.3 sin(4 pi x)", "clusters": [[-1.0, -0.5], [0.5, 1.0]],
        },
    )


def gen_two_moons(n: int = 1000, noise_std: float = 0.1, seed: int = 0, test_fraction: float = 0.3) -> Dataset:
    if n < 2:
        raise ContractError(f"gen_two_moons needs n >= 2, got {n}")
    x, y = make_moons(n_samples=n, noise=noise_std if noise_std > 0 else None, random_state=seed)
    split = np.full(n, "train", dtype=object)
    if test_fraction > 0:
        _, test_idx = train_test_split(
            np.arange(n), test_size=test_fraction, stratify=y, random_state=seed
        )
        split[test_idx] = "test"
    return Dataset(
        inputs=x, targets=y, task="classification", num_classes=2, split=split,
        metadata={
            "generator": "two_moons", "seed": seed, "n": n, "noise_std": noise_std,
            "test_fraction": test_fraction,
        },
    )


def gen_ood_inputs(reference: Dataset, shift, scale: float, n: int, seed: int = 0) -> np.ndarray:
    """Gaussian cloud centered at reference mean + shift with covariance scale^2 I."""
    shift = np.asarray(shift, dtype=np.float64).reshape(-1)
    if shift.shape[0] != reference.input_dim:
        raise ContractError(f"shift has dimension {shift.shape[0]}, dataset has {reference.input_dim}")
    if scale < 0:
        raise ContractError(f"scale must be nonnegative, got {scale}")
    rng = np.random.default_rng(seed)
    center = reference.inputs.mean(axis=0) + shift
    return center + scale * rng.standard_normal((n, reference.input_dim))


def rotate_inputs(inputs: np.ndarray, angle_deg: float, center=None) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != 2:
        raise ContractError(f"rotation needs (N, 2) inputs, got {inputs.shape}")
    theta = math.radians(angle_deg)
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    origin = np.zeros(2) if center is None else np.asarray(center, dtype=np.float64)
    return (inputs - origin) @ rotation.T + origin


def input_grid(lo: float = -2.0, hi: float = 2.0, n: int = 401) -> np.ndarray:
    return np.linspace(lo, hi, n).reshape(-1, 1)


GENERATORS = {
    "foong1d": gen_foong1d,
    "two_moons": gen_two_moons,
}


def generate(name: str, seed: int, **params) -> Dataset:
    try:
        generator = GENERATORS[name]
    except KeyError:
        raise ContractError(f"unknown dataset generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return generator(seed=seed, **params)


def save_csv(dataset: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.inputs, columns=[f"x_{i}" for i in range(dataset.input_dim)])
    frame["y"] = dataset.targets
    frame["split"] = dataset.split
    frame.to_csv(path, index=False, encoding="utf-8")
    return path


def load_csv(path: str | Path, task: str, num_classes: int | None = None) -> Dataset:
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    feature_cols = sorted((c for c in frame.columns if c.startswith("x_")), key=lambda c: int(c[2:]))
    if not feature_cols or "y" not in frame.columns:
        raise ContractError(f"{path}: expected columns x_0..x_(D-1) and y, got {list(frame.columns)}")
    expected = [f"x_{i}" for i in range(len(feature_cols))]
    if feature_cols != expected:
        raise ContractError(f"{path}: feature columns must be contiguous, got {feature_cols}")

    split = frame["split"].to_numpy(dtype=object) if "split" in frame.columns else None
    if task == "classification" and num_classes is None:
        num_classes = int(frame["y"].max()) + 1
    return Dataset(
        inputs=frame[feature_cols].to_numpy(dtype=np.float64),
        targets=frame["y"].to_numpy(),
        task=task,
        num_classes=num_classes,
        split=split,
        metadata={"generator": "csv", "path": str(path)},
    )
