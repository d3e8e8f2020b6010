"""Dense-matrix primitives: SVD, effective rank, distances, orthogonal sampling.

Everything here operates on plain float64 ndarrays in row-major order; the
matrices in scope are small (at most a few thousand entries), so no sparse or
blocked formats are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Singular values below this fraction of the largest one are treated as exact
#: zeros by the rank-related utilities (floating-point noise floor).
RANK_FLOOR = 1e-10


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Full SVD with singular values in descending order."""

    singular_values: np.ndarray  # (min(m, n),)
    left_vectors: np.ndarray     # (m, m), columns are left singular vectors
    right_vectors: np.ndarray    # (n, n), columns are right singular vectors

    def reconstruct(self) -> np.ndarray:
        k = self.singular_values.size
        return (self.left_vectors[:, :k] * self.singular_values) @ self.right_vectors[:, :k].T


def svd(matrix) -> SvdResult:
    arr = as_matrix(matrix)
    if arr.size == 0:
        raise ValueError("svd requires a nonempty matrix")
    u, s, vh = np.linalg.svd(arr)
    return SvdResult(singular_values=s, left_vectors=u, right_vectors=vh.T)


def effective_rank(matrix, threshold: float = 0.9) -> int:
    """Smallest j whose top-j singular values reach ``threshold`` of the total.

    The zero matrix has no signal and reports rank 0. Singular values under
    ``RANK_FLOOR`` times the largest are discarded first, so an exact low-rank
    product is not inflated by round-off tails.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    arr = as_matrix(matrix)
    if arr.size == 0:
        return 0
    values = np.linalg.svd(arr, compute_uv=False)
    if values[0] <= 0.0:
        return 0
    values = values[values > RANK_FLOOR * values[0]]
    cumulative = np.cumsum(values)
    return int(np.searchsorted(cumulative, threshold * cumulative[-1], side="left")) + 1


def frobenius_distance(estimate, reference) -> float:
    """Unsquared Frobenius norm of the difference."""
    a = as_matrix(estimate, "estimate")
    b = as_matrix(reference, "reference")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def numerical_rank(matrix) -> int:
    """Rank with the RANK_FLOOR relative cutoff."""
    arr = as_matrix(matrix)
    if arr.size == 0:
        return 0
    values = np.linalg.svd(arr, compute_uv=False)
    if values[0] <= 0.0:
        return 0
    return int(np.count_nonzero(values > RANK_FLOOR * values[0]))


def _orthonormal_range(matrix: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the column space, rank-truncated."""
    u, s, _ = np.linalg.svd(matrix, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return u[:, :0]
    return u[:, s > RANK_FLOOR * s[0]]


def orthogonal_complement_sample(rowspace_of, colspace_of, out_rank: int,
                                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample a factor pair living in the orthogonal complement of a given pair.

    Returns ``(d, c)`` where the columns of ``d`` are orthogonal to the column
    space of ``colspace_of`` and the rows of ``c`` are orthogonal to the row
    space of ``rowspace_of``. Gaussian draws are projected onto the
    complements, so with probability 1 the rank of the summed products is
    additive: rank(colspace_of @ rowspace_of + d @ c) grows by exactly
    ``out_rank``.

    Consumes two draws from ``rng`` (d first, then c).
    """
    row_src = as_matrix(rowspace_of, "rowspace_of")
    col_src = as_matrix(colspace_of, "colspace_of")
    m = col_src.shape[0]
    n = row_src.shape[1]
    if out_rank < 0:
        raise ValueError(f"out_rank must be non-negative, got {out_rank}")
    if out_rank == 0:
        return np.zeros((m, 0)), np.zeros((0, n))
    col_basis = _orthonormal_range(col_src)
    row_basis = _orthonormal_range(row_src.T)
    if out_rank > m - col_basis.shape[1] or out_rank > n - row_basis.shape[1]:
        raise ValueError(
            f"out_rank {out_rank} exceeds the free dimensions "
            f"({m - col_basis.shape[1]} columns, {n - row_basis.shape[1]} rows)")
    d = rng.normal(size=(m, out_rank))
    d -= col_basis @ (col_basis.T @ d)
    c = rng.normal(size=(out_rank, n))
    c -= (c @ row_basis) @ row_basis.T
    return d, c
