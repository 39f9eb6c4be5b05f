"""Network primitives: softmax, layer norm, GELU, 3x3 conv, attention."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from xlce.autograd.tensor import (
    ShapeError,
    Tensor,
    _make,
    _unbroadcast,
    as_tensor,
    matmul,
    permute,
    reshape,
    swap_last,
)

_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def softmax_rows(x: Tensor, scale: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax of ``x / scale`` over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; True entries get
    exactly zero weight.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows needs rank >= 2, got {x.shape}")
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    z = x.data / float(scale)
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def fn(g):
        return ((y * (g - np.sum(g * y, axis=-1, keepdims=True))) / float(scale),)

    return _make(y, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last dim {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        dxhat = g * gd
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return dx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)

    def fn(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D cross-correlation in channels-last layout.

    ``x`` is ``[H, W, C_in]`` or ``[B, H, W, C_in]``; ``kernel`` is
    ``[k, k, C_in, C_out]`` with odd ``k``; ``bias`` is ``[C_out]``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeError(f"kernel must be [k, k, C_in, C_out] with odd k, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[-1] != cin:
        raise ShapeError(f"conv2d input {x.shape} does not match kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match C_out={cout}")
    B, H, W, _ = xd.shape
    p = k // 2
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.stack(
        [xp[:, i : i + H, j : j + W, :] for i in range(k) for j in range(k)], axis=3
    ).reshape(B, H, W, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = cols @ kmat + bias.data
    if squeeze:
        out = out[0]

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(-1, cout)
        dk = (cols.reshape(-1, k * k * cin).T @ g2).reshape(kernel.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(B, H, W, k * k, cin)
            dxp = np.zeros_like(xp)
            for t in range(k * k):
                i, j = divmod(t, k)
                dxp[:, i : i + H, j : j + W, :] += dcols[:, :, :, t, :]
            dx = dxp[:, p : p + H, p : p + W, :]
            if squeeze:
                dx = dx[0]
        return dx, dk, db

    return _make(out, (x, kernel, bias), fn)


def causal_mask(t: int) -> np.ndarray:
    """Boolean [t, t] mask, True above the diagonal (future positions)."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    causal: bool = False,
) -> Tensor:
    """Per-head scaled dot-product attention, heads concatenated then projected.

    ``x_q``/``x_kv`` are ``[..., T, D]``; ``w_q``, ``w_k``, ``w_v`` are
    ``[I, D, d_k]``; ``w_o`` is ``[I * d_k, D_out]``.
    """
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    for w in (w_q, w_k, w_v):
        if w.ndim != 3 or w.shape[1] != x_q.shape[-1]:
            raise ShapeError(f"head weight {w.shape} does not match input width {x_q.shape[-1]}")
    heads, _, d_k = w_q.shape
    if w_o.shape[0] != heads * d_k:
        raise ShapeError(f"output weight {w_o.shape} needs {heads * d_k} rows")
    n = x_q.ndim - 2
    swap = tuple(range(n)) + (n + 1, n, n + 2)

    def project(x, w):
        # [I, D, d_k] -> [D, I*d_k]: one GEMM for all heads
        flat = reshape(permute(w, (1, 0, 2)), (w.shape[1], heads * d_k))
        y = matmul(x, flat)
        return permute(reshape(y, y.shape[:-1] + (heads, d_k)), swap)

    q = project(x_q, w_q)
    k = project(x_kv, w_k)
    v = project(x_kv, w_v)
    scores = matmul(q, swap_last(k))
    mask = causal_mask(scores.shape[-1]) if causal else None
    z = matmul(softmax_rows(scores, float(np.sqrt(d_k)), mask), v)
    z = permute(z, swap)
    z = reshape(z, z.shape[:-2] + (heads * d_k,))
    return matmul(z, w_o)


def mse_sum(a: Tensor, b) -> Tensor:
    """Sum of squared differences (scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(
        np.sum(diff * diff),
        (a, b),
        lambda g: (_unbroadcast(2.0 * g * diff, sa), _unbroadcast(-2.0 * g * diff, sb)),
    )
