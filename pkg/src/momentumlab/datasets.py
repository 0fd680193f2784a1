"""Seeded synthetic data generation and the closed-form population test loss.

All randomness goes through counter-based Philox streams derived from a master
seed plus a per-tensor stream index, so regenerating any single tensor is
independent of the order in which other tensors were drawn.  Replicated grid
sweeps therefore produce identical data no matter how cells are scheduled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError

# Stream indices (one sub-stream per generated tensor).
STREAM_FEATURES = 0
STREAM_TS_INPUTS = 1
STREAM_TS_TEACHER = 2
STREAM_TS_STUDENT_INIT = 3
STREAM_TS_TEST_INPUTS = 4
STREAM_DEEP_LINEAR_INIT = 5


def stream(seed: int, index: int) -> np.random.Generator:
    """Return the Philox generator for sub-stream `index` of master `seed`."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Dataset:
    """One regression instance: rows of `features` are the inputs x_i."""

    features: np.ndarray          # (n, d)
    targets: np.ndarray           # (n,)
    ground_truth: np.ndarray | None = None
    mean: float = 0.0
    stddev: float = 1.0
    sparsity: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DimensionMismatchError("features must be a nonempty 2-D matrix")
        if self.targets.shape != (self.features.shape[0],):
            raise DimensionMismatchError("targets must be a vector with one entry per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=float)
            if self.ground_truth.shape != (self.features.shape[1],):
                raise DimensionMismatchError("ground_truth must have one entry per column")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SparseRegressionSpec:
    n: int = 20
    d: int = 30
    s: int = 5
    mean: float = 1.0
    stddev: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.s <= self.d):
            raise ValueError(f"need 1 <= s <= d, got s={self.s}, d={self.d}")
        if self.stddev <= 0:
            raise ValueError("stddev must be positive")


@dataclass(frozen=True)
class TeacherStudentSpec:
    input_dim: int = 2
    teacher_width: int = 5
    student_width: int = 20
    n_samples: int = 15
    seed: int = 0

    def __post_init__(self):
        if min(self.teacher_width, self.student_width) < 1:
            raise ValueError("widths must be >= 1")


def gen_sparse_regression(spec: SparseRegressionSpec) -> Dataset:
    """Noiseless sparse instance: x_i ~ N(mean*1, stddev^2 I), y = X @ theta_star.

    theta_star has its first `s` coordinates equal to 1/sqrt(s) (unit l2 norm)
    and zeros elsewhere.  Support placement is irrelevant under the
    coordinate-i.i.d. feature law, so the first-coordinates convention keeps
    instances easy to eyeball.
    """
    rng = stream(spec.seed, STREAM_FEATURES)
    z = rng.standard_normal((spec.n, spec.d))
    features = spec.mean + spec.stddev * z
    theta_star = np.zeros(spec.d)
    theta_star[: spec.s] = 1.0 / np.sqrt(spec.s)
    targets = features @ theta_star
    return Dataset(
        features=features,
        targets=targets,
        ground_truth=theta_star,
        mean=spec.mean,
        stddev=spec.stddev,
        sparsity=spec.s,
    )


def gen_teacher_student(spec: TeacherStudentSpec):
    """One-hidden-layer ReLU teacher labels standard-normal inputs.

    Returns (dataset, teacher) where `teacher` is a ready-to-evaluate
    ModelSpec-with-weights pair (spec, flat weight vector).  The dataset has no
    linear ground truth; `mean`/`stddev` describe the input law.
    """
    from . import models  # deferred: models depends on Dataset

    rng_x = stream(spec.seed, STREAM_TS_INPUTS)
    inputs = rng_x.standard_normal((spec.n_samples, spec.input_dim))

    widths = (spec.input_dim, spec.teacher_width, 1)
    rng_w = stream(spec.seed, STREAM_TS_TEACHER)
    teacher_w = models.mlp_random_weights(widths, rng_w, with_biases=True)
    targets = models.mlp_predict(teacher_w, inputs, widths, activation="relu")

    dataset = Dataset(features=inputs, targets=targets, mean=0.0, stddev=1.0, sparsity=0)
    teacher_spec = models.relu_mlp_model(dataset, widths)
    return dataset, (teacher_spec, teacher_w)


def population_test_loss(theta, theta_star, mean: float, stddev: float) -> float:
    """Expected squared-error loss of `theta` under x ~ N(mean*1, stddev^2 I).

    Closed form: 0.5 * (stddev^2 ||e||^2 + mean^2 (1'e)^2) with e = theta - theta_star.
    Using the exact expectation instead of a sampled test set removes test-set
    variance from downstream comparisons.
    """
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if theta.shape != theta_star.shape:
        raise DimensionMismatchError("theta and theta_star must have the same shape")
    err = theta - theta_star
    return 0.5 * (stddev**2 * float(err @ err) + mean**2 * float(np.sum(err)) ** 2)


# --- CSV + JSON sidecar interchange ------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, path: str | Path, spec: SparseRegressionSpec | None = None) -> None:
    """Write `<path>.csv` (x_1..x_d, y) plus `<path>.json` with spec and theta*."""
    path = Path(path)
    d = dataset.d
    header = ",".join([f"x_{j+1}" for j in range(d)] + ["y"])
    lines = [header]
    for i in range(dataset.n):
        row = [_fmt(v) for v in dataset.features[i]] + [_fmt(dataset.targets[i])]
        lines.append(",".join(row))
    path.with_suffix(".csv").write_text("\n".join(lines) + "\n")

    sidecar = {
        "mean": dataset.mean,
        "stddev": dataset.stddev,
        "sparsity": dataset.sparsity,
        "ground_truth": None if dataset.ground_truth is None else [float(v) for v in dataset.ground_truth],
        "spec": None
        if spec is None
        else {"n": spec.n, "d": spec.d, "s": spec.s, "mean": spec.mean, "stddev": spec.stddev, "seed": spec.seed},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    text = path.with_suffix(".csv").read_text().strip().split("\n")
    rows = [line.split(",") for line in text[1:]]
    table = np.array([[float(v) for v in row] for row in rows])
    sidecar = json.loads(path.with_suffix(".json").read_text())
    gt = sidecar["ground_truth"]
    return Dataset(
        features=table[:, :-1],
        targets=table[:, -1],
        ground_truth=None if gt is None else np.array(gt),
        mean=sidecar["mean"],
        stddev=sidecar["stddev"],
        sparsity=sidecar["sparsity"],
    )
