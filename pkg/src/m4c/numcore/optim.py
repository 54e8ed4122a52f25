"""Adam and global-norm gradient clipping over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, ValidationError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays;
    a missing or ``None`` gradient counts as zero.
    Returns ``(params, state)``.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.vdot(g, g))
    return float(np.sqrt(total))


def clip_global_grad_norm(grads, max_norm: float):
    """Scale all gradients by ``max_norm / G`` when their joint L2 norm ``G`` exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValidationError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (None if g is None else g * scale) for k, g in grads.items()}
