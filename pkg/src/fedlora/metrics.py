"""Per-client diagnostics records and their CSV serialization.

The CSV layout is a cross-implementation interface: fixed header, floats at 17
significant digits (lossless for float64 round trips), rows sorted by
(round, client_id), and the sentinel -1 for fields an algorithm does not
produce.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

METRICS_HEADER = ("round", "step", "client_id", "train_loss", "test_loss",
                  "fro_dist_sq", "eff_rank", "hypergrad_norm", "current_rank_k")

#: Serialized value for fields that do not apply to the algorithm at hand.
NOT_APPLICABLE = -1


@dataclass
class MetricsRecord:
    round: int
    step: int
    client_id: int
    train_loss: float
    test_loss: float
    fro_dist_sq: float      # squared Frobenius distance to ground truth, or -1
    eff_rank: int
    hypergrad_norm: float   # -1 for algorithms without a hypergradient
    current_rank_k: int     # heterogeneous-rank algorithms only, else -1

    def __post_init__(self):
        if self.train_loss < 0 or self.test_loss < 0:
            raise ValueError("losses must be non-negative")

    def row(self) -> list[str]:
        out = []
        for name in METRICS_HEADER:
            value = getattr(self, name)
            if isinstance(value, int):
                out.append(str(value))
            else:
                out.append(f"{value:.17g}")
        return out


@dataclass
class RoundLog:
    """All clients' records for one communication round."""

    index: int
    records: list[MetricsRecord]


class MetricsWriter:
    """Streaming CSV writer; one append per round keeps partial runs usable."""

    def __init__(self, path):
        self.path = path
        self._handle = open(path, "w", newline="")
        self._writer = csv.writer(self._handle)
        self._writer.writerow(METRICS_HEADER)
        self._handle.flush()

    def append(self, records) -> None:
        for record in sorted(records, key=lambda r: (r.round, r.client_id)):
            self._writer.writerow(record.row())
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_metrics(records, path) -> None:
    """Write a full record list (sorted by round then client) to ``path``."""
    with MetricsWriter(path) as writer:
        writer.append(records)


_INT_FIELDS = {"round", "step", "client_id", "eff_rank", "current_rank_k"}


def read_metrics(path) -> list[MetricsRecord]:
    valid = {f.name for f in fields(MetricsRecord)}
    records = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header in {path}: {reader.fieldnames}")
        for row in reader:
            kwargs = {}
            for name, raw in row.items():
                if name not in valid:
                    continue
                kwargs[name] = int(raw) if name in _INT_FIELDS else float(raw)
            records.append(MetricsRecord(**kwargs))
    return records
