"""Shared test fixtures that are not pytest fixtures."""

import numpy as np

from xlce.baselines import HyOmpConfig, build_hybrid_dictionaries
from xlce.channel import ArrayConfig

# near-field distances well inside the Rayleigh distance of a 256-element array
RECOVERY_DISTANCES = (10.0, 20.0, 40.0)
RECOVERY_COHERENCE = 0.35


def recovery_dictionaries(M=256):
    arr = ArrayConfig(M)
    cfg = HyOmpConfig(M, M, RECOVERY_DISTANCES, sparsity_far=1, sparsity_near=2)
    return arr, cfg, build_hybrid_dictionaries(arr, cfg)


def incoherent_support(D, rng, mu=RECOVERY_COHERENCE, n_near=2):
    """Draw one far atom and ``n_near`` near atoms whose pairwise coherence,
    and the near atoms' coherence with every far atom, stay at or below ``mu``."""
    far_coh = np.abs(D.far.conj().T @ D.near).max(axis=0)
    eligible = np.flatnonzero(far_coh <= mu)
    while True:
        f = int(rng.integers(D.far.shape[1]))
        near = rng.choice(eligible, n_near, replace=False)
        A = np.column_stack([D.far[:, f]] + [D.near[:, k] for k in near])
        G = np.abs(A.conj().T @ A)
        np.fill_diagonal(G, 0.0)
        if G.max() <= mu:
            return f, [int(k) for k in near], A


# gradient-check cases: each builder takes a Generator and returns (f, inputs)

from xlce.autograd import (  # noqa: E402
    Tensor,
    concat,
    conv2d,
    gelu,
    getitem,
    layer_norm,
    matmul,
    mean,
    mse_sum,
    multi_head_attention,
    permute,
    reshape,
    softmax_rows,
    swap_last,
    tsum,
)


def _t(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _probe(rng, shape):
    """Random fixed weights so sum(out * R) exercises every output entry."""
    return rng.standard_normal(shape)


def _dot(out, R):
    return tsum(out * R)


def case_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4)
    R = _probe(rng, (3, 4))
    return lambda a, b: _dot(a + b, R), [a, b]


def case_sub(rng):
    a, b = _t(rng, 2, 3, 1), _t(rng, 3, 5)
    R = _probe(rng, (2, 3, 5))
    return lambda a, b: _dot(a - b, R), [a, b]


def case_mul(rng):
    a, b = _t(rng, 4, 3), _t(rng, 1, 3)
    R = _probe(rng, (4, 3))
    return lambda a, b: _dot(a * b * 1.5, R), [a, b]


def case_div_scalar(rng):
    a = _t(rng, 5)
    R = _probe(rng, (5,))
    return lambda a: _dot(a / 3.0, R), [a]


def case_matmul(rng):
    a, b = _t(rng, 4, 5), _t(rng, 5, 6)
    R = _probe(rng, (4, 6))
    return lambda a, b: _dot(matmul(a, b), R), [a, b]


def case_matmul_batched(rng):
    a, b = _t(rng, 2, 3, 4, 5), _t(rng, 3, 5, 2)
    R = _probe(rng, (2, 3, 4, 2))
    return lambda a, b: _dot(matmul(a, b), R), [a, b]


def case_matmul_folded(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    R = _probe(rng, (2, 3, 5))
    return lambda a, b: _dot(matmul(a, b), R), [a, b]


def case_structural(rng):
    a = _t(rng, 2, 3, 4)
    R = _probe(rng, (4, 6))

    def f(a):
        x = permute(swap_last(a), (1, 0, 2))  # (4, 2, 3)
        x = reshape(x, (4, 6))
        return _dot(x, R)

    return f, [a]


def case_getitem(rng):
    a = _t(rng, 5, 4)
    R = _probe(rng, (3, 2))
    R2 = _probe(rng, (3, 4))
    idx = np.array([0, 2, 2])
    return lambda a: _dot(getitem(a, (slice(1, 4), slice(0, 2))), R) + _dot(a[idx], R2), [a]


def case_concat(rng):
    a, b = _t(rng, 3, 2), _t(rng, 3, 4)
    R = _probe(rng, (3, 6))
    return lambda a, b: _dot(concat([a, b]), R), [a, b]


def case_reductions(rng):
    a = _t(rng, 3, 4)
    R = _probe(rng, (3,))
    return lambda a: _dot(tsum(a, axis=1), R) + mean(a * a), [a]


def case_softmax(rng):
    x = _t(rng, 3, 4, scale=2.0)
    R = _probe(rng, (3, 4))
    return lambda x: _dot(softmax_rows(x, 1.7), R), [x]


def case_softmax_masked(rng):
    x = _t(rng, 2, 4, 4)
    R = _probe(rng, (2, 4, 4))
    mask = np.triu(np.ones((4, 4), dtype=bool), 1)
    return lambda x: _dot(softmax_rows(x, 2.0, mask), R), [x]


def case_layer_norm(rng):
    x, g, b = _t(rng, 4, 6), _t(rng, 6), _t(rng, 6)
    R = _probe(rng, (4, 6))
    return lambda x, g, b: _dot(layer_norm(x, g, b), R), [x, g, b]


def case_gelu(rng):
    x = _t(rng, 10)
    R = _probe(rng, (10,))
    return lambda x: _dot(gelu(x), R), [x]


def case_conv2d(rng):
    x, k, b = _t(rng, 6, 6, 2), _t(rng, 3, 3, 2, 3), _t(rng, 3)
    R = _probe(rng, (6, 6, 3))
    return lambda x, k, b: _dot(conv2d(x, k, b), R), [x, k, b]


def case_conv2d_batched(rng):
    x, k, b = _t(rng, 2, 4, 4, 3), _t(rng, 3, 3, 3, 2), _t(rng, 2)
    R = _probe(rng, (2, 4, 4, 2))
    return lambda x, k, b: _dot(conv2d(x, k, b), R), [x, k, b]


def case_attention(rng):
    x = _t(rng, 5, 8)
    wq, wk, wv = _t(rng, 2, 8, 4, scale=0.5), _t(rng, 2, 8, 4, scale=0.5), _t(rng, 2, 8, 4)
    wo = _t(rng, 8, 6)
    R = _probe(rng, (5, 6))
    causal = bool(rng.integers(2))

    def f(x, wq, wk, wv, wo):
        return _dot(multi_head_attention(x, x, wq, wk, wv, wo, causal=causal), R)

    return f, [x, wq, wk, wv, wo]


def case_mse(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return lambda a, b: mse_sum(a, b), [a, b]


OP_CASES = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "div_scalar": case_div_scalar,
    "matmul": case_matmul,
    "matmul_batched": case_matmul_batched,
    "matmul_folded": case_matmul_folded,
    "transpose_permute_reshape": case_structural,
    "getitem": case_getitem,
    "concat": case_concat,
    "sum_mean": case_reductions,
    "softmax": case_softmax,
    "softmax_masked": case_softmax_masked,
    "layer_norm": case_layer_norm,
    "gelu": case_gelu,
    "conv2d": case_conv2d,
    "conv2d_batched": case_conv2d_batched,
    "multi_head_attention": case_attention,
    "mse_sum": case_mse,
}


A3_MODEL = dict(M=16, F=4, I=2, d=16, n_layers=2, n_tuned=2, post_filters=4, init_std=0.3)


def full_model_case(rng, **overrides):
    """Forward + MSE loss over every trainable parameter of a toy model.

    The final conv is randomized so the noise branch contributes. The key
    slice of each fused qkv bias is excluded: softmax is shift invariant
    per query row, so its gradient is identically zero and central
    differences only measure roundoff there.
    """
    from xlce.model import ModelConfig, ModelParams, forward_grid
    from xlce.training import mse_loss

    cfg = ModelConfig(**{**A3_MODEL, **overrides})
    params = ModelParams.init(cfg, seed=int(rng.integers(1 << 31)))
    for name in ("post.conv3.K", "post.conv3.b"):
        params[name].data[...] = rng.standard_normal(params[name].shape) * 0.3
    x = rng.standard_normal((2, cfg.side, cfg.side, 2))
    y = rng.standard_normal((2, cfg.side, cfg.side, 2))
    names = [p.name for p in params.trainable()]
    exclude = []
    for n in names:
        if n.endswith("attn.bqkv"):
            mask = np.zeros(3 * cfg.d, dtype=bool)
            mask[cfg.d : 2 * cfg.d] = True
            exclude.append(mask)
        else:
            exclude.append(None)

    def f(*_):
        return mse_loss(y, forward_grid(Tensor(x), params, cfg))

    return f, [params[n] for n in names], exclude
