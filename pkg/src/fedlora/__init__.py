"""Deterministic simulator for personalized federated low-rank adapter training.

The package provides a two-level adapter trainer driven by single-loop bilevel
updates, three baselines (plain averaging, heterogeneous-rank pruning, and
MAML-style personalization), a synthetic reduced-rank regression testbed, and
a closed-form quadratic harness for checking the optimizer's convergence
bounds.
"""

__version__ = "0.1.0"

from .adapters import AdapterPair
from .linalg import SvdResult, effective_rank, frobenius_distance, orthogonal_complement_sample, svd
from .rng import gaussian_matrix, stream

__all__ = [
    "AdapterPair",
    "SvdResult",
    "effective_rank",
    "frobenius_distance",
    "gaussian_matrix",
    "orthogonal_complement_sample",
    "stream",
    "svd",
    "__version__",
]
