"""Synthetic low-rank regression tasks with per-client ground truths.

Each client owns a planted coefficient matrix W* = left @ right built from
standard-normal factors, inputs drawn entrywise from N(0, 1), and targets
X W* plus centered Gaussian noise. The first ``train_fraction`` of samples is
the training split, the remainder the test split (index order, no shuffling).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .regression import RegressionData


@dataclass
class GroundTruth:
    """Planted coefficient matrix with its exact factorization."""

    matrix: np.ndarray        # (m, n) = left_factor @ right_factor
    rank: int
    left_factor: np.ndarray   # (m, rank)
    right_factor: np.ndarray  # (rank, n)


def make_ground_truth(m: int, n: int, rank: int, rng: np.random.Generator) -> GroundTruth:
    """Gaussian factor pair; the exact product is stored (left drawn first)."""
    if not 1 <= rank <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {rank}")
    left = rng.normal(size=(m, rank))
    right = rng.normal(size=(rank, n))
    return GroundTruth(matrix=left @ right, rank=rank, left_factor=left, right_factor=right)


def make_client_dataset(truth: GroundTruth, samples: int, noise_std: float,
                        train_fraction: float,
                        rng: np.random.Generator) -> tuple[RegressionData, RegressionData]:
    """Train/test split of X ~ N(0,1), Y = X W* + noise (X drawn before noise)."""
    if samples < 2:
        raise ValueError(f"need at least 2 samples, got {samples}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    m, n = truth.matrix.shape
    split = int(samples * train_fraction)
    if split < 1 or split >= samples:
        raise ValueError(f"degenerate split {split}/{samples - split}")
    x = rng.normal(size=(samples, m))
    noise = rng.normal(size=(samples, n)) * noise_std
    y = x @ truth.matrix + noise
    train = RegressionData(inputs=x[:split], targets=y[:split], role="train")
    test = RegressionData(inputs=x[split:], targets=y[split:], role="test")
    return train, test


@dataclass
class SyntheticSpec:
    """Configuration of the multi-client synthetic study."""

    dim_in: int = 10
    dim_out: int = 10
    true_ranks: tuple[int, ...] = (3, 4)
    samples: int = 1000
    noise: tuple[float, ...] = (0.1, 0.2)
    noise_is_std: bool = False     # default reads the noise levels as variances
    train_fraction: float = 0.7

    def __post_init__(self):
        self.true_ranks = tuple(int(r) for r in self.true_ranks)
        self.noise = tuple(float(v) for v in self.noise)
        if len(self.noise) != len(self.true_ranks):
            raise ValueError("need one noise level per client rank")
        for r in self.true_ranks:
            if not 1 <= r <= min(self.dim_in, self.dim_out):
                raise ValueError(f"true rank {r} out of range")

    @property
    def num_clients(self) -> int:
        return len(self.true_ranks)

    def noise_sigma(self, client_id: int) -> float:
        level = self.noise[client_id]
        return level if self.noise_is_std else float(np.sqrt(level))

    def noise_floor(self, client_id: int) -> float:
        """Expected per-sample test loss of the exact model (dimension-summed)."""
        return self.dim_out * self.noise_sigma(client_id) ** 2


@dataclass
class ClientTask:
    """One client's planted truth and data splits."""

    client_id: int
    truth: GroundTruth
    train: RegressionData
    test: RegressionData
    noise_sigma: float = field(default=0.0)


def build_study(spec: SyntheticSpec, seed: int) -> list[ClientTask]:
    """Per-client tasks with dedicated ground-truth and data streams."""
    tasks = []
    for k in range(spec.num_clients):
        truth = make_ground_truth(
            spec.dim_in, spec.dim_out, spec.true_ranks[k],
            rng_mod.stream(seed, rng_mod.GROUND_TRUTH_STREAM + k))
        sigma = spec.noise_sigma(k)
        train, test = make_client_dataset(
            truth, spec.samples, sigma, spec.train_fraction,
            rng_mod.stream(seed, rng_mod.CLIENT_DATA_STREAM + k))
        tasks.append(ClientTask(client_id=k, truth=truth, train=train, test=test,
                                noise_sigma=sigma))
    return tasks


def export_dataset_csv(data: RegressionData, path) -> None:
    """Write a dataset as CSV with header x_0..x_{p-1}, y_0..y_{q-1}."""
    n_in = data.inputs.shape[1]
    n_out = data.targets.shape[1]
    header = [f"x_{j}" for j in range(n_in)] + [f"y_{j}" for j in range(n_out)]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for xi, yi in zip(data.inputs, data.targets):
            writer.writerow([f"{v:.17g}" for v in xi] + [f"{v:.17g}" for v in yi])


def import_dataset_csv(path, role: str = "train") -> RegressionData:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        n_in = sum(1 for name in header if name.startswith("x_"))
        n_out = len(header) - n_in
        if n_in == 0 or n_out == 0 or any(not header[n_in + j].startswith("y_") for j in range(n_out)):
            raise ValueError(f"unrecognized dataset header in {path}")
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        raise ValueError(f"dataset file {path} has no rows")
    return RegressionData(inputs=arr[:, :n_in], targets=arr[:, n_in:], role=role)
