"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def check_gradients(f, inputs, step=1e-5, max_entries=None, rng=None):
    """Return the max relative error between analytic and numeric gradients.

    ``f`` maps the list ``inputs`` (Tensors with ``requires_grad``) to a scalar
    Tensor. Each checked entry compares the backprop gradient ``a`` against
    ``(f(x+h) - f(x-h)) / 2h`` with relative error ``|a-n| / max(|a|, |n|, 1e-8)``.
    With ``max_entries`` set, at most that many entries per input are probed,
    chosen by ``rng``.
    """
    for x in inputs:
        x.zero_grad()
    f(inputs).backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for x, grad in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f(inputs).data)
            flat[j] = orig - step
            fm = float(f(inputs).data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            ana = grad.reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for x in inputs:
        x.zero_grad()
    return worst
