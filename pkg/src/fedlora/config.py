"""Flat key-value run configuration: schema, defaults, resolution.

A run is described by one flat JSON object whose keys match the
FederationConfig and SyntheticSpec field names (plus nothing else). The same
document drives the `fed` subcommand, is embedded verbatim in every run
manifest, and re-running from that embedded copy reproduces the metrics CSV
byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

from .federation import ALGORITHMS, FederationConfig
from .synthdata import SyntheticSpec

REQUIRED_KEYS = ("algorithm", "clients", "steps", "interval", "seed")

FEDERATION_KEYS = {
    "algorithm", "clients", "steps", "interval", "seed", "upper_lr", "lower_lr",
    "batch_size", "rank", "client_rank", "upper_optimizer", "adam_beta1",
    "adam_beta2", "adam_eps", "weight_decay", "rank_min", "rank_max", "sparsity",
    "penalty", "prune_mode", "prune_tol_factor", "init_ranks", "hvp_mode",
    "index_pattern", "lower_steps", "fd_step", "maml_mode", "init_scheme",
}

DATA_KEYS = {
    "dim_in", "dim_out", "true_ranks", "samples", "noise", "noise_is_std",
    "train_fraction",
}


class ConfigError(ValueError):
    """Configuration document violates the schema."""


def validate_keys(document: dict) -> None:
    missing = [key for key in REQUIRED_KEYS if key not in document]
    unknown = [key for key in document if key not in FEDERATION_KEYS | DATA_KEYS]
    problems = []
    if missing:
        problems.append("missing required keys: " + ", ".join(sorted(missing)))
    if unknown:
        problems.append("unknown keys: " + ", ".join(sorted(unknown)))
    if problems:
        raise ConfigError("; ".join(problems))


def resolve(document: dict) -> tuple[FederationConfig, SyntheticSpec]:
    """Build validated config objects from a flat document."""
    validate_keys(document)
    fed_kwargs = {k: v for k, v in document.items() if k in FEDERATION_KEYS}
    data_kwargs = {k: v for k, v in document.items() if k in DATA_KEYS}
    try:
        cfg = FederationConfig(**fed_kwargs)
        spec = SyntheticSpec(**data_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if spec.num_clients != cfg.clients:
        raise ConfigError(
            f"clients is {cfg.clients} but true_ranks/noise describe "
            f"{spec.num_clients} clients")
    return cfg, spec


def load_config(path) -> dict:
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return document


def synth_defaults(algorithm: str, seed: int) -> dict:
    """Fully resolved defaults of the canned two-client synthetic study.

    Total steps, interval, ranks, noise levels, and the per-algorithm learning
    rates follow the published synthetic setup; the two-level trainer and the
    heterogeneous-rank baseline use plain SGD locally (the synthetic study
    reports plain updates), while the remaining baselines keep their usual
    AdamW upper optimizer.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    document = {
        "algorithm": algorithm,
        "clients": 2,
        "steps": 2000,
        "interval": 10,
        "seed": int(seed),
        "batch_size": None,
        "dim_in": 10,
        "dim_out": 10,
        "true_ranks": [3, 4],
        "samples": 1000,
        "noise": [0.1, 0.2],
        "noise_is_std": False,
        "train_fraction": 0.7,
    }
    if algorithm == "pf2lora":
        document.update({
            "rank": 4, "client_rank": 2,
            "upper_lr": 0.005, "lower_lr": 0.002,
            "upper_optimizer": "sgd",
            "init_scheme": "gaussian-orthogonal",
        })
    elif algorithm == "hetlora":
        document.update({
            "upper_lr": 0.002, "lower_lr": 0.002,
            "rank_min": 1, "rank_max": 12,
            "init_ranks": [2, 10],
            "sparsity": 0.3, "penalty": 0.1,
            "prune_mode": "trailing-penalty",
            "upper_optimizer": "sgd",
        })
    elif algorithm == "homlora":
        document.update({
            "rank": 4,
            "upper_lr": 0.005,
            "upper_optimizer": "adamw",
            "init_scheme": "gaussian-orthogonal",
        })
    else:  # perfedavg
        document.update({
            "rank": 4,
            "upper_lr": 0.005, "lower_lr": 0.002,
            "upper_optimizer": "adamw",
            "maml_mode": "first-order",
            "init_scheme": "gaussian-orthogonal",
        })
    return document
