"""AdamW with decoupled weight decay, and the cosine learning-rate schedule.

The decay step (p <- p - lr*wd*p) is applied before the bias-corrected
Adam update, never folded into the gradient.  A NaN/Inf gradient aborts
the step with a diagnostic naming the offending parameter.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DivergenceError


class OptimState:
    """Per-parameter moment estimates plus the shared step counter."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.betas = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0


def adamw_step(state, grads, lr):
    """One update over all tracked parameters; deterministic and in place."""
    if len(grads) != len(state.params):
        raise ConfigError(f"got {len(grads)} gradients for {len(state.params)} parameters")
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(state.params, grads)):
        if not np.all(np.isfinite(g)):
            name = getattr(p, "name", "") or f"parameter[{i}]"
            raise DivergenceError(f"non-finite gradient for {name}")
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def cosine_lr(epoch, epochs, base_lr=2e-4, lr_floor=1e-7):
    """Cosine annealing from base_lr (epoch 0) down to lr_floor (last epoch).

    Endpoints are returned exactly; in between,
    lr = floor + 0.5*(base - floor)*(1 + cos(pi * epoch / epochs)).
    """
    if not 0 <= epoch <= epochs:
        raise ConfigError(f"epoch {epoch} outside schedule range [0, {epochs}]")
    if epoch == 0:
        return base_lr
    if epoch == epochs:
        return lr_floor
    return lr_floor + 0.5 * (base_lr - lr_floor) * (1.0 + math.cos(math.pi * epoch / epochs))
