"""Model configuration, the named parameter set, freezing and weight files."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from xlce.autograd import Parameter

XCEW_MAGIC = b"XCEW1\n"
GPT2_VOCAB = 50257


class ConfigError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``spatial_head_dim`` defaults to M (one M-wide projection per head);
    ``backbone_heads`` must divide ``d``.
    """

    M: int = 16
    F: int = 64
    I: int = 4
    d: int = 64
    n_layers: int = 4
    n_tuned: int = 2
    ffn_mult: int = 4
    causal: bool = True
    backbone_heads: int = 2
    spatial_head_dim: int | None = None
    post_filters: int = 64
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        s = math.isqrt(self.M) if self.M > 0 else 0
        if s * s != self.M or self.M < 1:
            raise ConfigError(f"M must be a perfect square, got {self.M}")
        for name in ("F", "I", "d", "ffn_mult", "backbone_heads", "post_filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0 or not 0 <= self.n_tuned <= self.n_layers:
            raise ConfigError(
                f"need 0 <= n_tuned <= n_layers, got n_tuned={self.n_tuned}, n_layers={self.n_layers}"
            )
        if self.d % self.backbone_heads:
            raise ConfigError(f"d={self.d} not divisible by backbone_heads={self.backbone_heads}")
        if self.spatial_head_dim is not None and self.spatial_head_dim < 1:
            raise ConfigError("spatial_head_dim must be >= 1")

    @property
    def side(self) -> int:
        return math.isqrt(self.M)

    @property
    def d_s(self) -> int:
        return self.M if self.spatial_head_dim is None else self.spatial_head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for ``cfg``."""
    F, I, M, d, ds, P = cfg.F, cfg.I, cfg.M, cfg.d, cfg.d_s, cfg.post_filters
    hidden = cfg.ffn_mult * F
    shapes: dict[str, tuple[int, ...]] = {"pre.conv.K": (3, 3, 2, F), "pre.conv.b": (F,)}
    for blk in (1, 2):
        p = f"embed.block{blk}."
        for w in ("Wq", "Wk", "Wv"):
            shapes[p + f"feat_attn.{w}"] = (I, F, F)
        shapes[p + "feat_attn.Wo"] = (I * F, F)
        for w in ("Wq", "Wk", "Wv"):
            shapes[p + f"spat_attn.{w}"] = (I, M, ds)
        shapes[p + "spat_attn.Wo"] = (I * ds, M)
        shapes[p + "fuse_fc.W"] = (2 * F, F)
        shapes[p + "fuse_fc.b"] = (F,)
        shapes[p + "ln1.gamma"] = (F,)
        shapes[p + "ln1.beta"] = (F,)
        shapes[p + "ffn.w1"] = (F, hidden)
        shapes[p + "ffn.b1"] = (hidden,)
        shapes[p + "ffn.w2"] = (hidden, F)
        shapes[p + "ffn.b2"] = (F,)
        shapes[p + "ln2.gamma"] = (F,)
        shapes[p + "ln2.beta"] = (F,)
    shapes["embed.proj_fc.W"] = (F, d)
    shapes["embed.proj_fc.b"] = (d,)
    shapes["pos_embed"] = (M, d)
    for k in range(1, cfg.n_layers + 1):
        p = f"backbone.layer{k}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "attn.Wqkv"] = (d, 3 * d)
        shapes[p + "attn.bqkv"] = (3 * d,)
        shapes[p + "attn.Wo"] = (d, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.w1"] = (d, 4 * d)
        shapes[p + "mlp.b1"] = (4 * d,)
        shapes[p + "mlp.w2"] = (4 * d, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["backbone.ln_f.gamma"] = (d,)
    shapes["backbone.ln_f.beta"] = (d,)
    shapes["post.fc.W"] = (d, F)
    shapes["post.fc.b"] = (F,)
    shapes["post.conv1.K"] = (3, 3, F, P)
    shapes["post.conv1.b"] = (P,)
    shapes["post.conv2.K"] = (3, 3, P, P)
    shapes["post.conv2.b"] = (P,)
    shapes["post.conv3.K"] = (3, 3, P, 2)
    shapes["post.conv3.b"] = (2,)
    return shapes


def _layer_index(name: str) -> int | None:
    if not name.startswith("backbone.layer"):
        return None
    return int(name[len("backbone.layer") :].split(".", 1)[0])


def is_frozen(name: str, cfg: ModelConfig) -> bool:
    """Backbone layers 1..n_layers-n_tuned are frozen; nothing else is."""
    k = _layer_index(name)
    return k is not None and k <= cfg.n_layers - cfg.n_tuned


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ModelParams:
    """Ordered mapping of parameter name -> :class:`Parameter`."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._params = dict(params)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "ModelParams":
        """Truncated-normal weights, zero biases, unit LN gains, zero final conv."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                data = np.ones(shape)
            elif leaf.startswith("b") or name.startswith("post.conv3."):
                data = np.zeros(shape)
            else:
                data = _trunc_normal(rng, shape, config.init_std)
            params[name] = Parameter(
                name, data, trainable=not is_frozen(name, config), dtype=dtype
            )
        return cls(config, params)

    @property
    def dtype(self):
        return next(iter(self._params.values())).data.dtype

    def astype(self, dtype) -> "ModelParams":
        """Copy with every tensor cast to ``dtype`` (flags preserved)."""
        return ModelParams(
            self.config,
            {n: Parameter(n, p.data, p.trainable, dtype=dtype) for n, p in self._params.items()},
        )

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for n, arr in snap.items():
            self._params[n].data[...] = arr


def freeze_partition(params: ModelParams, config: ModelConfig | None = None):
    """Freeze the lower backbone layers; mark every other parameter trainable."""
    cfg = config or params.config
    for name, p in params.items():
        p.trainable = not is_frozen(name, cfg)


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    frozen: int
    unused_embedding: int = 0

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def frozen_with_unused_table(self) -> int:
        return self.frozen + self.unused_embedding


def param_count(source: ModelParams | ModelConfig) -> ParamCount:
    """Exact (trainable, frozen) counts.

    A bare :class:`ModelConfig` is counted from its shapes with the default
    freeze partition and nothing is allocated. ``unused_embedding`` reports
    the size of a GPT-2 token-embedding table (vocab x d) that this model
    never instantiates.
    """
    if isinstance(source, ModelConfig):
        cfg = source
        items = ((n, int(np.prod(s)), not is_frozen(n, cfg)) for n, s in param_shapes(cfg).items())
    else:
        cfg = source.config
        items = ((n, p.size, p.trainable) for n, p in source.items())
    trainable = frozen = 0
    for _, size, train in items:
        if train:
            trainable += size
        else:
            frozen += size
    return ParamCount(trainable, frozen, GPT2_VOCAB * cfg.d)


def save_weights(params: ModelParams, path):
    """Write an XCEW1 file: magic, JSON manifest line, little-endian float64 blobs."""
    manifest = []
    offset = 0
    for name, p in params.items():
        manifest.append(
            {"name": name, "shape": list(p.shape), "trainable": p.trainable, "offset": offset}
        )
        offset += 8 * p.size
    header = {"config": params.config.to_dict(), "params": manifest, "nbytes": offset}
    blobs = [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values()]
    payload = XCEW_MAGIC + json.dumps(header).encode("utf-8") + b"\n" + b"".join(blobs)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(path, config: ModelConfig | None = None) -> ModelParams:
    """Read an XCEW1 file, validating it against ``config`` (or its own config)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(XCEW_MAGIC):
        raise WeightFileError(f"{path}: bad magic, expected {XCEW_MAGIC!r}")
    nl = raw.find(b"\n", len(XCEW_MAGIC))
    if nl < 0:
        raise WeightFileError(f"{path}: missing manifest line")
    try:
        header = json.loads(raw[len(XCEW_MAGIC) : nl].decode("utf-8"))
        manifest = header["params"]
        file_cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"{path}: malformed manifest: {exc}") from exc
    cfg = config or file_cfg
    expected = param_shapes(cfg)
    body = raw[nl + 1 :]
    names = [m["name"] for m in manifest]
    unknown = [n for n in names if n not in expected]
    if unknown:
        raise WeightFileError(f"{path}: unknown parameter names: {', '.join(unknown)}")
    missing = [n for n in expected if n not in names]
    if missing:
        raise WeightFileError(f"{path}: missing parameters: {', '.join(missing)}")
    params = {}
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise WeightFileError(
                f"{path}: parameter {name} has shape {shape}, config expects {expected[name]}"
            )
        start = int(entry["offset"])
        stop = start + 8 * int(np.prod(shape))
        if start < 0 or stop > len(body):
            raise WeightFileError(f"{path}: blob for {name} is truncated")
        data = np.frombuffer(body[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Parameter(name, data, trainable=bool(entry["trainable"]))
    if len(body) != int(header.get("nbytes", len(body))):
        raise WeightFileError(f"{path}: expected {header['nbytes']} blob bytes, got {len(body)}")
    return ModelParams(cfg, {n: params[n] for n in expected})
