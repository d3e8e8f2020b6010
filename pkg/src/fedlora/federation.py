"""Simulated multi-client training: local phases, synchronization, aggregation.

Clients run their local steps independently (optionally on a thread pool
capped by ``FEDLORA_THREADS``); a single coordinator performs the aggregation
barrier in fixed client order, so the round logs are a pure function of the
configuration regardless of scheduling. Aggregation only ever sees shared
adapters and scalar update norms; personal adapters and raw data never leave
the client.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import rng as rng_mod
from .adapters import AdapterPair, gaussian_pair, orthogonal_pair, pair_from_params, zero_product_pair
from .bilevel import BilevelStepConfig, bilevel_local_step, tree_axpy, tree_norm
from .linalg import effective_rank, frobenius_distance
from .metrics import NOT_APPLICABLE, MetricsRecord, RoundLog
from .optimizers import AdamWState, adamw_step, sgd_step
from .regression import RegressionData, TwoLevelRegressionTask, model_matrix, two_level_loss
from .synthdata import ClientTask

ALGORITHMS = ("pf2lora", "homlora", "hetlora", "perfedavg")

THREADS_ENV = "FEDLORA_THREADS"


@dataclass
class FederationConfig:
    """Algorithm selection plus every run hyperparameter."""

    algorithm: str
    clients: int
    steps: int                   # total local steps per client
    interval: int                # local steps between synchronizations
    seed: int
    upper_lr: float = 0.005
    lower_lr: float = 0.002
    batch_size: int | None = None          # None means full-batch gradients
    rank: int = 4                          # shared adapter rank
    client_rank: int = 2                   # personal adapter rank (two-level only)
    upper_optimizer: str = "adamw"         # or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # heterogeneous-rank baseline knobs
    rank_min: int = 1
    rank_max: int = 12
    sparsity: float = 0.3                  # fraction of trailing rank slots penalized
    penalty: float = 0.1                   # L2 coefficient on the trailing block
    prune_mode: str = "trailing-penalty"   # or "rank-decay"
    prune_tol_factor: float = 1e-4
    init_ranks: tuple[int, ...] | None = None
    # estimator switches
    hvp_mode: str = "analytic"
    index_pattern: str = "paper"
    lower_steps: int = 1
    fd_step: float = 1e-4
    maml_mode: str = "first-order"         # or "exact"
    init_scheme: str = "gaussian-orthogonal"  # or "zero-product"

    def __post_init__(self):
        if self.init_ranks is not None:
            self.init_ranks = tuple(int(r) for r in self.init_ranks)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.clients < 1:
            problems.append("clients must be at least 1")
        if self.steps < 1:
            problems.append("steps must be a positive integer")
        if self.interval < 1:
            problems.append("interval must be at least 1")
        if self.upper_lr <= 0 or self.lower_lr < 0:
            problems.append("learning rates must be positive")
        if self.rank < 1:
            problems.append("rank must be at least 1")
        if self.algorithm == "pf2lora" and not 0 < self.client_rank < self.rank:
            problems.append("client_rank must satisfy 0 < client_rank < rank")
        if self.algorithm == "hetlora":
            if not 1 <= self.rank_min <= self.rank_max:
                problems.append("need 1 <= rank_min <= rank_max")
            if not 0 < self.sparsity <= 1:
                problems.append("sparsity must be in (0, 1]")
            if self.penalty < 0:
                problems.append("penalty must be non-negative")
            if self.init_ranks is not None:
                if len(self.init_ranks) != self.clients:
                    problems.append("init_ranks must list one rank per client")
                elif any(not self.rank_min <= r <= self.rank_max for r in self.init_ranks):
                    problems.append("init_ranks must lie within [rank_min, rank_max]")
        if self.upper_optimizer not in ("adamw", "sgd"):
            problems.append(f"unknown upper_optimizer {self.upper_optimizer!r}")
        if self.prune_mode not in ("trailing-penalty", "rank-decay"):
            problems.append(f"unknown prune_mode {self.prune_mode!r}")
        if self.maml_mode not in ("first-order", "exact"):
            problems.append(f"unknown maml_mode {self.maml_mode!r}")
        if self.init_scheme not in ("gaussian-orthogonal", "zero-product"):
            problems.append(f"unknown init_scheme {self.init_scheme!r}")
        if problems:
            raise ValueError("; ".join(problems))


class BatchSampler:
    """Without-replacement minibatches, reshuffled each epoch from one stream.

    A short tail at the end of an epoch is discarded rather than padded so
    every batch has the configured size.
    """

    def __init__(self, samples: int, batch_size: int | None, rng: np.random.Generator):
        self.samples = samples
        self.batch_size = None if batch_size is None or batch_size >= samples else int(batch_size)
        self._rng = rng
        self._order = None
        self._cursor = 0

    def draw(self):
        if self.batch_size is None:
            return None  # full batch
        if self._order is None or self._cursor + self.batch_size > self.samples:
            self._order = self._rng.permutation(self.samples)
            self._cursor = 0
        batch = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


@dataclass
class ClientState:
    """Everything one client owns between synchronization barriers."""

    client_id: int
    w0: np.ndarray
    shared: AdapterPair
    local: AdapterPair | None
    train: RegressionData
    test: RegressionData
    task: TwoLevelRegressionTask
    sampler: BatchSampler
    ground_truth: np.ndarray | None = None
    upper_state: AdamWState | None = None
    current_rank: int = 0
    last_diag: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Aggregation primitives
# ---------------------------------------------------------------------------

def average_common(pairs: list[AdapterPair]) -> AdapterPair:
    """Entrywise mean of the factor matrices, each side separately."""
    if not pairs:
        raise ValueError("cannot average an empty adapter list")
    shape = (pairs[0].left.shape, pairs[0].right.shape)
    if any((p.left.shape, p.right.shape) != shape for p in pairs):
        raise ValueError("adapters must share shapes to be averaged")
    left = np.mean([p.left for p in pairs], axis=0)
    right = np.mean([p.right for p in pairs], axis=0)
    return AdapterPair(left, right)


def hetlora_truncate(pair: AdapterPair, rank: int) -> AdapterPair:
    """First ``rank`` columns of the left factor and rows of the right factor."""
    if rank > pair.rank:
        raise ValueError(f"cannot truncate rank {pair.rank} adapter to {rank}")
    return AdapterPair(pair.left[:, :rank].copy(), pair.right[:rank, :].copy())


def hetlora_zero_pad(pair: AdapterPair, rank_max: int) -> AdapterPair:
    """Pad the rank dimension with zeros; the product is unchanged."""
    if pair.rank > rank_max:
        raise ValueError(f"adapter rank {pair.rank} exceeds rank_max {rank_max}")
    extra = rank_max - pair.rank
    if extra == 0:
        return pair.copy()
    m, n = pair.shape
    left = np.hstack([pair.left, np.zeros((m, extra))])
    right = np.vstack([pair.right, np.zeros((extra, n))])
    return AdapterPair(left, right)


def hetlora_aggregate(entries: list[tuple[AdapterPair, float]]) -> AdapterPair:
    """Update-norm-weighted combination of zero-padded adapters.

    Weights are ||delta W_k|| / sum ||delta W_j||; when every norm is zero
    (e.g. the first round with zero-initialized products) this falls back to a
    plain average to avoid 0/0.
    """
    if not entries:
        raise ValueError("cannot aggregate an empty adapter list")
    pairs = [pair for pair, _ in entries]
    norms = np.asarray([norm for _, norm in entries], dtype=float)
    if np.any(norms < 0):
        raise ValueError("update norms must be non-negative")
    total = norms.sum()
    if total == 0:
        return average_common(pairs)
    weights = norms / total
    left = sum(w * p.left for w, p in zip(weights, pairs))
    right = sum(w * p.right for w, p in zip(weights, pairs))
    return AdapterPair(left, right)


def hetlora_initial_rank(client_index: int, num_clients: int,
                         rank_min: int, rank_max: int) -> int:
    """Spread formula rank_min + (rank_max - rank_min) k/M, rounded to nearest."""
    value = rank_min + (rank_max - rank_min) * client_index / num_clients
    return int(math.floor(value + 0.5))


def _penalized_start(cfg: FederationConfig, rank: int) -> int:
    """First rank index of the penalized trailing block."""
    if cfg.prune_mode == "rank-decay":
        return max(cfg.rank_min, int(math.floor(cfg.sparsity * rank)))
    return rank - int(math.ceil(cfg.sparsity * rank))


def column_importance(pair: AdapterPair) -> np.ndarray:
    """Per-rank importance: column norm of the left factor times row norm of the right."""
    return np.linalg.norm(pair.left, axis=0) * np.linalg.norm(pair.right, axis=1)


def hetlora_prune(pair: AdapterPair, current_rank: int, cfg: FederationConfig,
                  upper_state: AdamWState | None):
    """Drop unimportant trailing rank slots, never going below rank_min.

    In ``trailing-penalty`` mode a trailing slot is removed while its
    importance is below prune_tol_factor times the mean importance; in
    ``rank-decay`` mode the rank shrinks multiplicatively every call.
    """
    if cfg.prune_mode == "rank-decay":
        new_rank = max(cfg.rank_min, int(math.floor(cfg.sparsity * current_rank)))
    else:
        importance = column_importance(pair)
        tol = cfg.prune_tol_factor * float(importance.mean()) if importance.size else 0.0
        new_rank = current_rank
        while new_rank > cfg.rank_min and importance[new_rank - 1] < tol:
            new_rank -= 1
    if new_rank == current_rank:
        return pair, current_rank, upper_state
    pruned = hetlora_truncate(pair, new_rank)
    if upper_state is not None:
        upper_state = upper_state.slice_moments(
            lambda i, m: m[:, :new_rank] if i == 0 else m[:new_rank, :])
    return pruned, new_rank, upper_state


# ---------------------------------------------------------------------------
# Local phases
# ---------------------------------------------------------------------------

def _upper_step(cfg: FederationConfig, state: AdamWState | None, params, grads):
    if cfg.upper_optimizer == "sgd":
        return sgd_step(params, grads, cfg.upper_lr), None
    if state is None:
        state = AdamWState(learning_rate=cfg.upper_lr, beta1=cfg.adam_beta1,
                           beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                           weight_decay=cfg.weight_decay)
    state, params = adamw_step(state, params, grads)
    return params, state


def _step_config(cfg: FederationConfig) -> BilevelStepConfig:
    return BilevelStepConfig(lower_rate=cfg.lower_lr, upper_rate=cfg.upper_lr,
                             hvp_mode=cfg.hvp_mode, index_pattern=cfg.index_pattern,
                             lower_steps=cfg.lower_steps, fd_step=cfg.fd_step)


def _pf2lora_phase(client: ClientState, cfg: FederationConfig, n_steps: int) -> None:
    step_cfg = _step_config(cfg)
    x = client.shared.params()
    y = client.local.params()
    upper = client.upper_state if cfg.upper_optimizer == "adamw" else None
    diag = dict(client.last_diag)
    for _ in range(n_steps):
        batches = tuple(client.sampler.draw() for _ in range(4))
        if cfg.upper_optimizer == "sgd":
            x, y, _, diag = bilevel_local_step(client.task, x, y, step_cfg, batches, None)
        else:
            if upper is None:
                upper = AdamWState(learning_rate=cfg.upper_lr, beta1=cfg.adam_beta1,
                                   beta2=cfg.adam_beta2, eps=cfg.adam_eps,
                                   weight_decay=cfg.weight_decay)
            x, y, upper, diag = bilevel_local_step(client.task, x, y, step_cfg, batches, upper)
    client.shared = pair_from_params(x)
    client.local = pair_from_params(y)
    client.upper_state = upper
    client.last_diag = diag


def _homlora_phase(client: ClientState, cfg: FederationConfig, n_steps: int) -> None:
    x = client.shared.params()
    for _ in range(n_steps):
        grads = client.task.grad_x(x, None, client.sampler.draw())
        x, client.upper_state = _upper_step(cfg, client.upper_state, x, grads)
    client.shared = pair_from_params(x)


def maml_meta_gradient(grad_fn, x, inner_rate: float, mode: str, fd_step: float,
                       support_batch=None, query_batch=None):
    """Gradient of the adapt-then-evaluate objective f(x - a grad f(x)).

    Exact mode multiplies by (I - a H) with the Hessian-vector product taken
    by central differences of the gradient on the support batch; first-order
    mode drops the curvature term.
    """
    g_inner = grad_fn(x, support_batch)
    x_adapted = tree_axpy(x, -inner_rate, g_inner)
    g_outer = grad_fn(x_adapted, query_batch)
    if mode == "first-order":
        return g_outer
    norm = tree_norm(g_outer)
    if norm == 0.0:
        return g_outer
    eps = fd_step / norm
    plus = grad_fn(tree_axpy(x, eps, g_outer), support_batch)
    minus = grad_fn(tree_axpy(x, -eps, g_outer), support_batch)
    hv = tuple((a - b) / (2.0 * eps) for a, b in zip(plus, minus))
    return tuple(g - inner_rate * h for g, h in zip(g_outer, hv))


def _perfedavg_phase(client: ClientState, cfg: FederationConfig, n_steps: int) -> None:
    x = client.shared.params()
    grad_fn = lambda params, batch: client.task.grad_x(params, None, batch)
    for _ in range(n_steps):
        support = client.sampler.draw()
        query = client.sampler.draw()
        meta_grad = maml_meta_gradient(grad_fn, x, cfg.lower_lr, cfg.maml_mode,
                                       cfg.fd_step, support, query)
        x, client.upper_state = _upper_step(cfg, client.upper_state, x, meta_grad)
    client.shared = pair_from_params(x)


def _hetlora_phase(client: ClientState, cfg: FederationConfig, n_steps: int) -> None:
    left, right = client.shared.params()
    start = _penalized_start(cfg, client.current_rank)
    for _ in range(n_steps):
        g_left, g_right = client.task.grad_x((left, right), None, client.sampler.draw())
        if cfg.penalty > 0 and start < client.current_rank:
            g_left = g_left.copy()
            g_right = g_right.copy()
            g_left[:, start:] += 2.0 * cfg.penalty * left[:, start:]
            g_right[start:, :] += 2.0 * cfg.penalty * right[start:, :]
        (left, right), client.upper_state = _upper_step(
            cfg, client.upper_state, (left, right), (g_left, g_right))
    pair = AdapterPair(left, right)
    client.shared, client.current_rank, client.upper_state = hetlora_prune(
        pair, client.current_rank, cfg, client.upper_state)


_PHASES = {
    "pf2lora": _pf2lora_phase,
    "homlora": _homlora_phase,
    "hetlora": _hetlora_phase,
    "perfedavg": _perfedavg_phase,
}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _client_model(client: ClientState, cfg: FederationConfig) -> tuple[AdapterPair, AdapterPair | None]:
    """The personalized parameters a client would deploy right now."""
    if cfg.algorithm == "perfedavg":
        # personalize by one inner gradient step on the training split
        x = client.shared.params()
        grads = client.task.grad_x(x, None, None)
        adapted = tree_axpy(x, -cfg.lower_lr, grads)
        return pair_from_params(adapted), None
    return client.shared, client.local


def evaluate_client(client: ClientState, cfg: FederationConfig,
                    round_index: int, step: int) -> MetricsRecord:
    shared, local = _client_model(client, cfg)
    train_loss = two_level_loss(client.w0, shared, local, client.train)
    test_loss = two_level_loss(client.w0, shared, local, client.test)
    update = shared.product()
    if local is not None and local.rank > 0:
        update = update + local.product()
    if client.ground_truth is not None:
        dist = frobenius_distance(client.w0 + update, client.ground_truth)
        fro_dist_sq = dist * dist
    else:
        fro_dist_sq = float(NOT_APPLICABLE)
    return MetricsRecord(
        round=round_index,
        step=step,
        client_id=client.client_id,
        train_loss=train_loss,
        test_loss=test_loss,
        fro_dist_sq=fro_dist_sq,
        eff_rank=effective_rank(update, 0.9),
        hypergrad_norm=client.last_diag.get("hypergrad_norm", float(NOT_APPLICABLE))
        if cfg.algorithm == "pf2lora" else float(NOT_APPLICABLE),
        current_rank_k=client.current_rank if cfg.algorithm == "hetlora" else NOT_APPLICABLE,
    )


# ---------------------------------------------------------------------------
# Scheduler
# ---------------------------------------------------------------------------

def round_chunks(total_steps: int, interval: int) -> list[int]:
    """Local-step counts per round; a remainder becomes a final shorter round."""
    full, rest = divmod(total_steps, interval)
    return [interval] * full + ([rest] if rest else [])


def worker_count(default: int) -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if not raw:
        return max(1, default)
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc


def _sync_simple(clients: list[ClientState], cfg: FederationConfig) -> None:
    mean = average_common([c.shared for c in clients])
    for client in clients:
        client.shared = mean.copy()


def _sync_hetlora(clients: list[ClientState], cfg: FederationConfig) -> None:
    entries = []
    for client in clients:
        norm = float(np.linalg.norm(client.shared.product()))
        entries.append((hetlora_zero_pad(client.shared, cfg.rank_max), norm))
    merged = hetlora_aggregate(entries)
    for client in clients:
        client.shared = hetlora_truncate(merged, client.current_rank)


def run_round_scheduler(cfg: FederationConfig, clients: list[ClientState],
                        local_phase, synchronize) -> Iterator[RoundLog]:
    """Drive local phases and synchronization barriers, yielding one log per round.

    Client execution may be parallel (``FEDLORA_THREADS`` workers, default one
    per client); results are identical for any worker count because clients
    share no mutable state and the barrier runs in fixed client order.
    """
    if len(clients) != cfg.clients:
        raise ValueError(f"expected {cfg.clients} clients, got {len(clients)}")
    threads = worker_count(default=cfg.clients)
    chunks = round_chunks(cfg.steps, cfg.interval)
    step = 0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for round_index, chunk in enumerate(chunks, start=1):
            if pool is None:
                for client in clients:
                    local_phase(client, cfg, chunk)
            else:
                futures = [pool.submit(local_phase, client, cfg, chunk)
                           for client in clients]
                for future in futures:
                    future.result()
            step += chunk
            records = [evaluate_client(client, cfg, round_index, step)
                       for client in clients]
            synchronize(clients, cfg)
            yield RoundLog(index=round_index, records=records)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)


def run_pf2lora(cfg: FederationConfig, clients) -> Iterator[RoundLog]:
    if any(c.local is None for c in clients):
        raise ValueError("two-level training requires personal adapters")
    return run_round_scheduler(cfg, clients, _pf2lora_phase, _sync_simple)


def run_homlora(cfg: FederationConfig, clients) -> Iterator[RoundLog]:
    return run_round_scheduler(cfg, clients, _homlora_phase, _sync_simple)


def run_hetlora(cfg: FederationConfig, clients) -> Iterator[RoundLog]:
    return run_round_scheduler(cfg, clients, _hetlora_phase, _sync_hetlora)


def run_perfedavg(cfg: FederationConfig, clients) -> Iterator[RoundLog]:
    return run_round_scheduler(cfg, clients, _perfedavg_phase, _sync_simple)


_RUNNERS = {
    "pf2lora": run_pf2lora,
    "homlora": run_homlora,
    "hetlora": run_hetlora,
    "perfedavg": run_perfedavg,
}


def run_federation(cfg: FederationConfig, clients) -> Iterator[RoundLog]:
    return _RUNNERS[cfg.algorithm](cfg, clients)


# ---------------------------------------------------------------------------
# Client construction
# ---------------------------------------------------------------------------

def build_clients(cfg: FederationConfig, tasks: list[ClientTask]) -> list[ClientState]:
    """Assemble per-client state from synthetic tasks and the config's streams."""
    if len(tasks) != cfg.clients:
        raise ValueError(f"config expects {cfg.clients} clients, got {len(tasks)} tasks")
    dim_in = tasks[0].train.inputs.shape[1]
    dim_out = tasks[0].train.targets.shape[1]
    w0 = np.zeros((dim_in, dim_out))

    shared_rng = rng_mod.stream(cfg.seed, rng_mod.SHARED_INIT_STREAM)
    if cfg.algorithm == "hetlora":
        shared_init = None
    elif cfg.init_scheme == "gaussian-orthogonal":
        shared_init = gaussian_pair(dim_in, dim_out, cfg.rank, shared_rng)
    else:
        shared_init = zero_product_pair(dim_in, dim_out, cfg.rank, shared_rng,
                                        zero_side="left")

    clients = []
    for task in tasks:
        k = task.client_id
        init_rng = rng_mod.stream(cfg.seed, rng_mod.CLIENT_INIT_STREAM + k)
        local = None
        current_rank = 0
        if cfg.algorithm == "hetlora":
            if cfg.init_ranks is not None:
                r_k = cfg.init_ranks[k]
            else:
                r_k = hetlora_initial_rank(k, cfg.clients, cfg.rank_min, cfg.rank_max)
            shared = zero_product_pair(dim_in, dim_out, r_k, init_rng, zero_side="right")
            current_rank = r_k
        else:
            shared = shared_init.copy()
            if cfg.algorithm == "pf2lora":
                if cfg.init_scheme == "gaussian-orthogonal":
                    local = orthogonal_pair(shared, cfg.client_rank, init_rng)
                else:
                    local = zero_product_pair(dim_in, dim_out, cfg.client_rank,
                                              init_rng, zero_side="left")
        sampler = BatchSampler(task.train.samples, cfg.batch_size,
                               rng_mod.stream(cfg.seed, rng_mod.BATCH_STREAM + k))
        clients.append(ClientState(
            client_id=k,
            w0=w0,
            shared=shared,
            local=local,
            train=task.train,
            test=task.test,
            task=TwoLevelRegressionTask(w0, task.train),
            sampler=sampler,
            ground_truth=task.truth.matrix,
            current_rank=current_rank,
        ))
    return clients
