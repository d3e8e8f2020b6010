"""Low-rank adapter containers and their initialization schemes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, orthogonal_complement_sample


@dataclass
class AdapterPair:
    """A trainable low-rank update ``left @ right`` added to a frozen weight.

    ``left`` is (m, rank), ``right`` is (rank, n). The rank dimension is the
    shared inner axis, so truncation and padding always act on columns of
    ``left`` and rows of ``right``.
    """

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = as_matrix(self.left, "left factor")
        self.right = as_matrix(self.right, "right factor")
        if self.left.shape[1] != self.right.shape[0]:
            raise ValueError(
                f"inner dimensions disagree: left {self.left.shape}, right {self.right.shape}")

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left.shape[0], self.right.shape[1])

    def product(self) -> np.ndarray:
        return self.left @ self.right

    def copy(self) -> AdapterPair:
        return AdapterPair(self.left.copy(), self.right.copy())

    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.left, self.right)


def pair_from_params(params: tuple[np.ndarray, np.ndarray]) -> AdapterPair:
    return AdapterPair(params[0], params[1])


def gaussian_pair(m: int, n: int, rank: int, rng: np.random.Generator) -> AdapterPair:
    """Both factors i.i.d. standard normal (left drawn first)."""
    return AdapterPair(rng.normal(size=(m, rank)), rng.normal(size=(rank, n)))


def zero_product_pair(m: int, n: int, rank: int, rng: np.random.Generator,
                      zero_side: str = "left") -> AdapterPair:
    """Gaussian on one factor, zeros on the other, so the product starts at 0."""
    if zero_side == "left":
        return AdapterPair(np.zeros((m, rank)), rng.normal(size=(rank, n)))
    if zero_side == "right":
        return AdapterPair(rng.normal(size=(m, rank)), np.zeros((rank, n)))
    raise ValueError(f"zero_side must be 'left' or 'right', got {zero_side!r}")


def orthogonal_pair(base: AdapterPair, rank: int, rng: np.random.Generator) -> AdapterPair:
    """Gaussian pair whose product is column- and row-orthogonal to ``base``'s.

    Used to start personal adapters in the complement of the shared one, which
    makes the combined rank exactly base.rank + rank at initialization.
    """
    d, c = orthogonal_complement_sample(base.right, base.left, rank, rng)
    return AdapterPair(d, c)
