"""MSE training with Adam and a step-decay schedule, plus NMSE evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, TextIO

import numpy as np

from xlce.autograd import Tensor, backward
from xlce.autograd.nn import mse_sum
from xlce.baselines import nmse_batch, to_db
from xlce.channel import ChannelSample, stack_samples
from xlce.model import ModelParams, forward_grid, from_grid, to_grid
from xlce.numerics import Rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_nmse_db")
_DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    ``dtype`` selects the arithmetic precision of training; weights are
    always stored as float64.
    """

    batch_size: int = 64
    epochs: int = 200
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 50
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValueError("batch_size, epochs and decay_every must be positive")
        if self.lr0 < 0 or not 0 < self.decay_factor <= 1 or self.eps_adam <= 0:
            raise ValueError("lr0 must be >= 0, decay_factor in (0, 1], eps_adam > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        state = cls()
        for p in params.trainable():
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state


def mse_loss(h_true: Tensor | np.ndarray, h_hat: Tensor) -> Tensor:
    """Mean over the batch axis of squared Frobenius norms."""
    h_true = h_true if isinstance(h_true, Tensor) else Tensor(h_true, dtype=h_hat.data.dtype)
    if h_true.shape != h_hat.shape:
        raise ValueError(f"shape mismatch: {h_true.shape} vs {h_hat.shape}")
    if h_hat.ndim < 1 or h_hat.shape[0] < 1:
        raise ValueError("empty batch")
    return mse_sum(h_hat, h_true) * (1.0 / h_hat.shape[0])


def adam_step(params: ModelParams, opt: OptimizerState, lr: float, cfg: TrainConfig | None = None):
    """One bias-corrected Adam update over trainable parameters; zeroes grads."""
    cfg = cfg or TrainConfig()
    b1, b2 = cfg.betas
    trainable = params.trainable()
    for p in trainable:
        if p.grad is None:
            raise TrainingError(f"trainable parameter {p.name} has no gradient")
    opt.t += 1
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for p in trainable:
        g = p.grad
        m = opt.m.setdefault(p.name, np.zeros_like(p.data))
        v = opt.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)).astype(p.data.dtype)
    params.zero_grad()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class EvalResult:
    nmse_linear: float
    nmse_db: float
    per_sample: np.ndarray


def predict(params: ModelParams, h_ls: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Model estimates for complex [N, M] LS inputs, evaluated in batches."""
    cfg = params.config
    out = np.empty(h_ls.shape, dtype=np.complex128)
    for start in range(0, len(h_ls), batch_size):
        chunk = to_grid(h_ls[start : start + batch_size], cfg.side)
        out[start : start + batch_size] = from_grid(forward_grid(chunk, params, cfg).data)
    return out


def evaluate_nmse(params: ModelParams, test_set: Sequence[ChannelSample], batch_size: int = 256) -> EvalResult:
    """Linear-domain mean NMSE over the set, its dB value (floored at -300) and per-sample values."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    h, h_ls, _ = stack_samples(test_set)
    per = nmse_batch(h, predict(params, h_ls, batch_size))
    mean = float(np.mean(per))
    return EvalResult(mean, to_db(mean), per)


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_val_nmse_db: float

    def log_csv(self) -> str:
        buf = io.StringIO()
        write_log(self.log, buf)
        return buf.getvalue()


def _log_fields(row: dict) -> list:
    return [row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_nmse_db"])]


def write_log(rows: Sequence[dict], stream: TextIO):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow(_log_fields(row))


def train(
    params: ModelParams,
    train_set: Sequence[ChannelSample],
    val_set: Sequence[ChannelSample],
    cfg: TrainConfig,
    log_stream: TextIO | None = None,
) -> TrainResult:
    """Train in place and leave ``params`` at the best-validation state.

    Batches are drawn from a permutation seeded with ``cfg.seed + epoch``.
    ``log_stream`` receives CSV rows as epochs finish.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    mcfg = params.config
    dtype = cfg.np_dtype
    work = params if params.dtype == dtype else params.astype(dtype)
    h, h_ls, _ = stack_samples(train_set)
    x_all = to_grid(h_ls, mcfg.side).astype(dtype)
    y_all = to_grid(h, mcfg.side).astype(dtype)
    opt = OptimizerState.for_params(work)
    n = len(train_set)
    rows: list[dict] = []
    best = (math.inf, -1, None)
    writer = csv.writer(log_stream, lineterminator="\n") if log_stream is not None else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = Rng(cfg.seed + epoch).permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            out = forward_grid(Tensor(x_all[idx]), work, mcfg)
            loss = mse_loss(y_all[idx], out)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            backward(loss)
            adam_step(work, opt, lr, cfg)
            total += value * len(idx)
            count += len(idx)
        val = evaluate_nmse(work, val_set)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_nmse_db": val.nmse_db}
        rows.append(row)
        if writer:
            writer.writerow(_log_fields(row))
        log.info("epoch %d lr %.3g loss %.6g val %.3f dB", epoch, lr, row["train_loss"], val.nmse_db)
        if val.nmse_linear < best[0]:
            best = (val.nmse_linear, epoch, work.snapshot())
    work.restore(best[2])
    if work is not params:
        # frozen tensors stay untouched so a precision round trip cannot alter them
        for p in params.trainable():
            p.data[...] = work[p.name].data
    return TrainResult(rows, best[1], to_db(best[0]))
