"""AdamW with decoupled weight decay and a reduce-on-plateau LR scheduler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState, frozen=()) -> OptimState:
    """One AdamW update, in place on ``params[name].data``.

    ``grads`` maps names to arrays; names in ``frozen`` or without a
    gradient are left untouched (their moments are not advanced).
    """
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        if name in frozen or grads.get(name) is None:
            continue
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        decay = dt(state.lr * state.weight_decay) * p.data
        p.data -= dt(state.lr) * step + decay
    return state


def step_from_grads(params: dict, state: OptimState, frozen=()) -> OptimState:
    """AdamW step using each parameter's accumulated ``.grad``."""
    return adamw_step(params, {k: p.grad for k, p in params.items()}, state, frozen)


@dataclass
class SchedulerState:
    lr: float = 1e-4
    mode: str = "min"
    factor: float = 0.5
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must be in (0, 1)")
        if self.mode != "min":
            raise ValueError("only mode='min' is supported")


def plateau_step(state: SchedulerState, val_metric: float) -> float:
    """Feed one validation value; returns the (possibly reduced) learning rate.

    Improvement means val_metric < best * (1 - threshold).  After more than
    ``patience`` epochs without one, lr is multiplied by ``factor`` (not
    below ``min_lr``) and the counter restarts.
    """
    if not math.isfinite(val_metric):
        raise ValueError(f"validation metric must be finite, got {val_metric}")
    improved = state.best == math.inf or val_metric < state.best * (1.0 - state.threshold)
    if improved:
        state.best = val_metric
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if state.epochs_since_improvement > state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.epochs_since_improvement = 0
    return state.lr
