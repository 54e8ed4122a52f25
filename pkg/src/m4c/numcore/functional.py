"""Fused differentiable operations used by the model.

Each op computes its forward in numpy and supplies a hand-written backward,
which keeps the graph small (one node per op rather than one per primitive).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import DimensionError, ValidationError
from .tensor import DTYPE, Tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis=-1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-12) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv_std * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    out = v * cdf

    def backward(g):
        return (g * (cdf + v * np.exp(-0.5 * v * v) * _INV_SQRT2PI),)

    return Tensor._make(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    xd, w = x.data, weight.data
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = g @ w
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def masked_fill(x: Tensor, mask, value) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; those entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return Tensor._make(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity unless ``train`` and ``p > 0``."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


def sigmoid_bce_with_logits(logits: Tensor, targets, mask=None, reduction="mean") -> Tensor:
    """Binary cross-entropy on logits, restricted to ``mask``.

    ``reduction="mean"`` averages over unmasked entries (0 if none);
    ``"none"`` returns the elementwise losses with masked entries set to 0.
    Masked entries may hold any value, including infinities.
    """
    targets = np.asarray(targets, dtype=DTYPE)
    if targets.shape != logits.shape:
        raise DimensionError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ValidationError("targets must be 0 or 1")
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    else:
        mask = np.asarray(mask)
        if mask.shape != logits.shape:
            raise DimensionError(f"mask shape {mask.shape} != logits shape {logits.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValidationError("mask must be 0 or 1")
        mask = mask.astype(bool)

    x = np.where(mask, logits.data, 0.0)
    # max(x, 0) - x*t + log(1 + exp(-|x|))
    elem = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    elem = np.where(mask, elem, 0.0)
    sig = np.where(mask, 0.5 * (1.0 + np.tanh(0.5 * x)), 0.0)
    dl = np.where(mask, sig - targets, 0.0)

    if reduction == "none":
        return Tensor._make(elem, (logits,), lambda g: (g * dl,))
    if reduction != "mean":
        raise ValidationError(f"unknown reduction {reduction!r}")
    count = int(mask.sum())
    if count == 0:
        return Tensor._make(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    return Tensor._make(np.array(elem.sum() / count), (logits,), lambda g: (g * dl / count,))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, add_mask, row_keep=None) -> Tensor:
    """``softmax(q k^T / sqrt(dh) + add_mask) v`` over (..., S, dh) inputs.

    ``add_mask`` is a constant additive mask broadcastable to (..., S, S).
    Rows where ``row_keep`` is 0 get all-zero attention weights.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale + add_mask
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    if row_keep is not None:
        p *= row_keep
    out = np.matmul(p, v.data)

    def backward(g):
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = np.matmul(ds, k.data) if q.requires_grad else None
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data) if k.requires_grad else None
        dv = np.matmul(np.swapaxes(p, -1, -2), g) if v.requires_grad else None
        return dq, dk, dv

    return Tensor._make(out, (q, k, v), backward)
