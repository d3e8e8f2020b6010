"""Seeded random-stream derivation.

All randomness in a run derives from a 64-bit root seed plus a non-negative
stream id. Equal (root_seed, stream_id) pairs replay identical sequences;
distinct stream ids are statistically independent by construction
(SeedSequence spawn keys feeding a counter-based Philox engine). This is what
makes multi-client runs reproducible regardless of scheduling order.
"""

from __future__ import annotations

import numpy as np

# Stream-id blocks, one per purpose. Per-client streams are block + client_id,
# so blocks must be spaced wider than any plausible client count.
GROUND_TRUTH_STREAM = 1_000
CLIENT_DATA_STREAM = 2_000
SHARED_INIT_STREAM = 3_000
CLIENT_INIT_STREAM = 4_000
BATCH_STREAM = 5_000


def stream(root_seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for (root_seed, stream_id)."""
    if stream_id < 0:
        raise ValueError(f"stream_id must be non-negative, got {stream_id}")
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(seq))


def gaussian_matrix(rows: int, cols: int, mean: float, std: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Dense matrix with i.i.d. N(mean, std^2) entries drawn from ``rng``.

    Deterministic given the generator state; ``std == 0`` collapses every
    entry to ``mean``.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return rng.normal(loc=mean, scale=std, size=(rows, cols))
