"""First-order optimizers operating on tuples of parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import NumericFailure


def _as_tuple(params):
    return tuple(np.asarray(p, dtype=float) for p in params)


def sgd_step(params, grads, rate: float):
    """params - rate * grads, elementwise over the parameter tuple."""
    params = _as_tuple(params)
    grads = _as_tuple(grads)
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient structures disagree")
    return tuple(p - rate * g for p, g in zip(params, grads))


@dataclass(frozen=True)
class AdamWState:
    """Decoupled-weight-decay Adam state; apply with :func:`adamw_step`.

    The state is immutable: each step returns a fresh state with the moment
    accumulators advanced and the step counter incremented by exactly one.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    exp_avg: tuple = ()
    exp_avg_sq: tuple = ()
    step_count: int = 0

    def slice_moments(self, slicer) -> AdamWState:
        """Apply an array slicing function to the accumulators (rank pruning)."""
        if not self.exp_avg:
            return self
        return replace(self,
                       exp_avg=tuple(slicer(i, m) for i, m in enumerate(self.exp_avg)),
                       exp_avg_sq=tuple(slicer(i, v) for i, v in enumerate(self.exp_avg_sq)))


def adamw_step(state: AdamWState, params, grads) -> tuple[AdamWState, tuple]:
    """One AdamW update; deterministic, bias-corrected, decay decoupled."""
    params = _as_tuple(params)
    grads = _as_tuple(grads)
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient structures disagree")
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise NumericFailure("non-finite gradient passed to adamw_step")
    if state.exp_avg:
        exp_avg, exp_avg_sq = state.exp_avg, state.exp_avg_sq
        if any(m.shape != p.shape for m, p in zip(exp_avg, params)):
            raise ValueError("optimizer state shapes disagree with parameters")
    else:
        exp_avg = tuple(np.zeros_like(p) for p in params)
        exp_avg_sq = tuple(np.zeros_like(p) for p in params)

    t = state.step_count + 1
    new_avg = tuple(state.beta1 * m + (1.0 - state.beta1) * g
                    for m, g in zip(exp_avg, grads))
    new_sq = tuple(state.beta2 * v + (1.0 - state.beta2) * g * g
                   for v, g in zip(exp_avg_sq, grads))
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    new_params = []
    for p, m, v in zip(params, new_avg, new_sq):
        step = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updated = p * (1.0 - state.learning_rate * state.weight_decay)
        new_params.append(updated - state.learning_rate * step)
    new_state = replace(state, exp_avg=new_avg, exp_avg_sq=new_sq, step_count=t)
    return new_state, tuple(new_params)
