"""Finite-difference oracle for the backprop engine.

``grad_check`` compares reverse-mode gradients against central differences
(f(x+he) - f(x-he)) / 2h, either on every coordinate or on a seeded random
subset (>= 32 coordinates) when the input is large.  The relative error
uses a max(|a|, |b|, 1e-8) denominator so that near-zero gradients do not
blow the ratio up.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, zero_grads


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f, inputs, step=1e-3, max_coords=None, rng=None):
    """Max relative error between backprop and central differences.

    f: callable taking ``inputs`` (a list of Tensors) and returning a
    scalar Tensor.  ``inputs`` are perturbed in place and restored.  With
    ``max_coords`` set, a random subset of at least 32 coordinates (or all
    of them, if fewer exist) is probed per the oracle contract.
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ConfigError("grad_check inputs must be Tensors")
        t.requires_grad = True

    zero_grads(inputs)
    out = f(inputs)
    if out.data.size != 1:
        raise ConfigError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in inputs]

    coords = []
    for i, t in enumerate(inputs):
        for flat in range(t.data.size):
            coords.append((i, flat))
    if max_coords is not None and len(coords) > max_coords:
        budget = max(32, int(max_coords))
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=min(budget, len(coords)), replace=False)
        coords = [coords[int(k)] for k in sorted(picks)]

    worst = 0.0
    for i, flat in coords:
        t = inputs[i]
        base = t.data.flat[flat]
        t.data.flat[flat] = base + step
        hi = float(f(inputs).data)
        t.data.flat[flat] = base - step
        lo = float(f(inputs).data)
        t.data.flat[flat] = base
        numeric = (hi - lo) / (2.0 * step)
        worst = max(worst, relative_error(float(analytic[i].flat[flat]), numeric))
    zero_grads(inputs)
    return worst
