"""Forward pass: conv preprocessing, dual-attention embedding, GPT-2 style
backbone, conv postprocessing and residual noise subtraction.

All functions accept an optional leading batch axis. Antenna m maps to grid
cell (m // sqrt(M), m % sqrt(M)); channel 0 holds real parts, 1 imaginary.
"""

from __future__ import annotations

import numpy as np

from xlce.autograd import (
    Tensor,
    concat,
    conv2d,
    gelu,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    permute,
    reshape,
    softmax_rows,
    swap_last,
)
from xlce.autograd.nn import causal_mask
from xlce.model.params import ConfigError, ModelConfig, ModelParams


def to_grid(h: np.ndarray, side: int | None = None) -> np.ndarray:
    """Complex [..., M] -> real [..., s, s, 2]."""
    h = np.asarray(h)
    M = h.shape[-1]
    s = side or int(round(np.sqrt(M)))
    if s * s != M:
        raise ConfigError(f"M={M} is not a perfect square")
    grid = np.stack([h.real, h.imag], axis=-1)
    return grid.reshape(h.shape[:-1] + (s, s, 2)).astype(np.float64)


def from_grid(grid: np.ndarray) -> np.ndarray:
    """Real [..., s, s, 2] -> complex [..., M] (inverse of :func:`to_grid`)."""
    grid = np.asarray(grid)
    s = grid.shape[-2]
    flat = grid.reshape(grid.shape[:-3] + (s * s, 2))
    return flat[..., 0] + 1j * flat[..., 1]


def preprocess(h_ls_grid: Tensor, params: ModelParams) -> Tensor:
    """3x3 conv to F channels, flattened to tokens: [..., s, s, 2] -> [..., M, F]."""
    h1 = conv2d(h_ls_grid, params["pre.conv.K"], params["pre.conv.b"])
    return reshape(h1, h1.shape[:-3] + (h1.shape[-3] * h1.shape[-2], h1.shape[-1]))


def feature_attention(h_in: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Attention across the M antenna tokens, each F wide."""
    p = prefix + "feat_attn."
    return multi_head_attention(
        h_in, h_in, params[p + "Wq"], params[p + "Wk"], params[p + "Wv"], params[p + "Wo"]
    )


def spatial_attention(h_in: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Attention across the F feature tokens, each M wide (transposed input)."""
    p = prefix + "spat_attn."
    ht = swap_last(h_in)
    z = multi_head_attention(
        ht, ht, params[p + "Wq"], params[p + "Wk"], params[p + "Wv"], params[p + "Wo"]
    )
    return swap_last(z)


def pfsa_block(h_in: Tensor, params: ModelParams, prefix: str, eps: float = 1e-5) -> Tensor:
    """Parallel feature/spatial attention, fused, with two residual + LN stages."""
    h_co = concat([feature_attention(h_in, params, prefix), spatial_attention(h_in, params, prefix)])
    h_fc = linear(h_co, params[prefix + "fuse_fc.W"], params[prefix + "fuse_fc.b"])
    h_ln = layer_norm(h_fc + h_in, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"], eps)
    hidden = gelu(linear(h_ln, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"]))
    ffn = linear(hidden, params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])
    return layer_norm(ffn + h_ln, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"], eps)


def embed(h2: Tensor, params: ModelParams, eps: float = 1e-5) -> Tensor:
    """Two PFSA blocks, projection F -> d, plus learned positional embedding."""
    h3 = pfsa_block(pfsa_block(h2, params, "embed.block1.", eps), params, "embed.block2.", eps)
    h4 = linear(h3, params["embed.proj_fc.W"], params["embed.proj_fc.b"])
    return h4 + params["pos_embed"]


def _self_attention(x: Tensor, params: ModelParams, prefix: str, heads: int, causal: bool) -> Tensor:
    d = x.shape[-1]
    hd = d // heads
    lead = x.shape[:-2]
    T = x.shape[-2]
    n = len(lead)
    swap = tuple(range(n)) + (n + 1, n, n + 2)
    qkv = linear(x, params[prefix + "Wqkv"], params[prefix + "bqkv"])

    def split(i):
        part = qkv[..., i * d : (i + 1) * d]
        part = reshape(part, lead + (T, heads, hd))
        return permute(part, swap)

    q, k, v = split(0), split(1), split(2)
    mask = causal_mask(T) if causal else None
    z = matmul(softmax_rows(matmul(q, swap_last(k)), float(np.sqrt(hd)), mask), v)
    z = permute(z, swap)
    return linear(reshape(z, lead + (T, d)), params[prefix + "Wo"], params[prefix + "bo"])


def backbone_forward(
    h5: Tensor, params: ModelParams, config: ModelConfig, final_ln: bool = True
) -> Tensor:
    """Pre-LN decoder stack followed by the final layer norm."""
    x = h5
    eps = config.ln_eps
    for k in range(1, config.n_layers + 1):
        p = f"backbone.layer{k}."
        a = layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], eps)
        x = x + _self_attention(a, params, p + "attn.", config.backbone_heads, config.causal)
        m = layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], eps)
        m = linear(gelu(linear(m, params[p + "mlp.w1"], params[p + "mlp.b1"])), params[p + "mlp.w2"], params[p + "mlp.b2"])
        x = x + m
    if not final_ln:
        return x
    return layer_norm(x, params["backbone.ln_f.gamma"], params["backbone.ln_f.beta"], eps)


def postprocess(h6: Tensor, h_ls_grid: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """FC d -> F, reshape to the antenna grid, three convs predict the noise,
    which is subtracted from the LS grid."""
    h7 = linear(h6, params["post.fc.W"], params["post.fc.b"])
    s = config.side
    g = reshape(h7, h7.shape[:-2] + (s, s, config.F))
    g = gelu(conv2d(g, params["post.conv1.K"], params["post.conv1.b"]))
    g = gelu(conv2d(g, params["post.conv2.K"], params["post.conv2.b"]))
    h8 = conv2d(g, params["post.conv3.K"], params["post.conv3.b"])
    return h_ls_grid - h8


def forward_grid(h_ls_grid, params: ModelParams, config: ModelConfig | None = None) -> Tensor:
    """Network on real grids: [..., s, s, 2] -> [..., s, s, 2]."""
    cfg = config or params.config
    x = h_ls_grid if isinstance(h_ls_grid, Tensor) else Tensor(h_ls_grid, dtype=params.dtype)
    if x.shape[-3:] != (cfg.side, cfg.side, 2):
        raise ConfigError(f"input grid {x.shape} does not match M={cfg.M}")
    h2 = preprocess(x, params)
    h5 = embed(h2, params, cfg.ln_eps)
    h6 = backbone_forward(h5, params, cfg)
    return postprocess(h6, x, params, cfg)


def forward(h_ls: np.ndarray, params: ModelParams, config: ModelConfig | None = None) -> np.ndarray:
    """Complex LS estimate(s) [..., M] -> refined complex estimate(s) [..., M]."""
    cfg = config or params.config
    h_ls = np.asarray(h_ls)
    if h_ls.shape[-1] != cfg.M:
        raise ConfigError(f"input length {h_ls.shape[-1]} does not match M={cfg.M}")
    out = forward_grid(to_grid(h_ls, cfg.side), params, cfg)
    return from_grid(out.data)
