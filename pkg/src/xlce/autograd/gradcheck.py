from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from xlce.autograd.tensor import Tensor


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    n_coords: int = 20,
    seed: int = 0,
    exclude: Sequence[np.ndarray | None] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor. Up to ``n_coords`` random
    coordinates of every input with ``requires_grad`` are probed; frozen
    inputs are skipped, as are coordinates flagged True in the optional
    per-input boolean masks ``exclude``. Relative error uses
    ``max(|a|, |n|, 1e-8)`` as the denominator. Returns 0.0 when nothing was
    checked.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    loss = f(*inputs)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pos, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        allowed = np.arange(flat.size)
        if exclude is not None and exclude[pos] is not None:
            allowed = allowed[~np.asarray(exclude[pos], dtype=bool).reshape(-1)]
        count = min(n_coords, allowed.size)
        for idx in rng.choice(allowed, size=count, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f(*inputs).data)
            flat[idx] = orig - h
            fm = float(f(*inputs).data)
            flat[idx] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[idx])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
