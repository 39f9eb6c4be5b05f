"""Classical channel estimators and the NMSE metric.

LS is the identity on the pilot observation. LMMSE is the Wiener filter
built from a sample covariance. HY-OMP runs orthogonal matching pursuit
first over a far-field angle dictionary and then over a near-field
angle x distance dictionary, refitting all selected atoms jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from xlce.channel import ArrayConfig, steer_far, steer_near
from xlce.numerics import hermitian_solve


def nmse(h_true: np.ndarray, h_hat: np.ndarray) -> float:
    """||h_true - h_hat||^2 / ||h_true||^2 for one sample."""
    h_true = np.asarray(h_true)
    h_hat = np.asarray(h_hat)
    if h_true.shape != h_hat.shape:
        raise ValueError(f"length mismatch: {h_true.shape} vs {h_hat.shape}")
    energy = float(np.vdot(h_true, h_true).real)
    if not energy > 0:
        raise ValueError("h_true has zero energy")
    err = h_true - h_hat
    return float(np.vdot(err, err).real) / energy


def nmse_batch(h_true: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    """Per-row NMSE for [N, M] arrays."""
    num = np.sum(np.abs(h_true - h_hat) ** 2, axis=-1)
    den = np.sum(np.abs(h_true) ** 2, axis=-1)
    if np.any(den <= 0):
        raise ValueError("h_true has a zero-energy row")
    return num / den


def to_db(x: float, floor_db: float = -300.0) -> float:
    """10 log10(x), clamped below at ``floor_db``."""
    if x <= 0:
        return floor_db
    return float(max(10.0 * np.log10(x), floor_db))


# LMMSE


@dataclass
class LmmseModel:
    R_h: np.ndarray

    @property
    def M(self) -> int:
        return self.R_h.shape[0]


def fit_lmmse(training_channels: Sequence[np.ndarray] | np.ndarray) -> LmmseModel:
    """Sample covariance (1/N) sum h h^H, symmetrized, plus 1e-9 trace/M jitter."""
    H = np.asarray(training_channels, dtype=np.complex128)
    if H.ndim != 2 or H.shape[0] < 2:
        raise ValueError("need at least 2 training channels of equal length")
    N, M = H.shape
    R = H.T @ H.conj() / N
    R = 0.5 * (R + R.conj().T)
    R += (1e-9 * np.trace(R).real / M) * np.eye(M)
    return LmmseModel(R)


def lmmse_estimate(model: LmmseModel, h_ls: np.ndarray, snr_linear: float) -> np.ndarray:
    """R_h (R_h + I / snr)^-1 h_ls.

    ``h_ls`` may be one vector or an [N, M] batch sharing one SNR.
    """
    if not snr_linear > 0:
        raise ValueError(f"snr_linear must be > 0, got {snr_linear}")
    h_ls = np.asarray(h_ls, dtype=np.complex128)
    if h_ls.shape[-1] != model.M:
        raise ValueError(f"length mismatch: h_ls has {h_ls.shape[-1]}, model has M={model.M}")
    A = model.R_h + np.eye(model.M) / snr_linear
    x = hermitian_solve(A, h_ls.T)
    return (model.R_h @ x).T


def lmmse_estimate_many(model: LmmseModel, h_ls: np.ndarray, snr_linear: np.ndarray) -> np.ndarray:
    """LMMSE for an [N, M] batch with per-row SNRs; equal SNRs share one solve."""
    h_ls = np.asarray(h_ls, dtype=np.complex128)
    snr_linear = np.asarray(snr_linear, dtype=np.float64)
    out = np.empty_like(h_ls)
    for snr in np.unique(snr_linear):
        rows = np.flatnonzero(snr_linear == snr)
        out[rows] = lmmse_estimate(model, h_ls[rows], float(snr))
    return out


# HY-OMP


@dataclass(frozen=True)
class HyOmpConfig:
    """Dictionary grids and per-stage sparsity.

    ``residual_threshold`` (optional) stops either stage early once
    ||residual||^2 / M falls below it.
    """

    far_grid: int
    near_angle_grid: int
    near_dist_samples: tuple[float, ...]
    sparsity_far: int = 1
    sparsity_near: int = 5
    residual_threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "near_dist_samples", tuple(float(r) for r in self.near_dist_samples))
        if min(self.far_grid, self.near_angle_grid, self.sparsity_far, self.sparsity_near) < 0:
            raise ValueError("HY-OMP counts must be non-negative")
        r = np.asarray(self.near_dist_samples)
        if r.size and (np.any(r <= 0) or np.any(np.diff(r) <= 0)):
            raise ValueError("near_dist_samples must be positive and strictly increasing")
        if self.far_grid == 0 and (self.near_angle_grid == 0 or r.size == 0):
            raise ValueError("at least one dictionary must be non-empty")

    @classmethod
    def default(
        cls, array: ArrayConfig, r_range: tuple[float, float], L: int, L0: int, n_dist: int = 8
    ) -> "HyOmpConfig":
        """M-point grids, ``n_dist`` log-spaced distances, genie sparsity (L0, L - L0)."""
        dists = np.geomspace(r_range[0], r_range[1], n_dist) if n_dist > 1 else [r_range[0]]
        return cls(array.M, array.M, tuple(dists), L0, L - L0)


@dataclass
class HybridDictionaries:
    far: np.ndarray
    near: np.ndarray
    atoms: list[tuple] = field(default_factory=list)


def _sin_grid(n: int) -> np.ndarray:
    return -1.0 + 2.0 * np.arange(n) / n


def build_hybrid_dictionaries(array: ArrayConfig, cfg: HyOmpConfig) -> HybridDictionaries:
    """Far atoms on a uniform sin(theta) grid; near atoms on (sin grid x distances).

    Near columns are angle-major: column ``a * len(dists) + k`` holds angle
    ``a`` at distance ``k``. ``atoms`` lists (theta,) or (theta, r) per column,
    far columns first.
    """
    far_theta = np.arcsin(_sin_grid(cfg.far_grid))
    far = np.zeros((array.M, 0), complex)
    if cfg.far_grid:
        far = np.stack([steer_far(array, t) for t in far_theta], axis=1)
    near_cols, atoms = [], [(float(t),) for t in far_theta]
    for t in np.arcsin(_sin_grid(cfg.near_angle_grid)):
        for r in cfg.near_dist_samples:
            near_cols.append(steer_near(array, t, r))
            atoms.append((float(t), r))
    near = np.stack(near_cols, axis=1) if near_cols else np.zeros((array.M, 0), complex)
    if far.shape[1] + near.shape[1] == 0:
        raise ValueError("combined dictionary is empty")
    return HybridDictionaries(far, near, atoms)


def _omp_stage(y, D, support, columns, iters, threshold, trace):
    """Greedy steps over dictionary ``D``; ``columns`` collects selected atoms."""
    M = y.size
    residual = y - (np.stack(columns, 1) @ _lstsq(columns, y) if columns else 0)
    taken = np.zeros(D.shape[1], dtype=bool)
    for _ in range(iters):
        if threshold is not None and np.vdot(residual, residual).real / M < threshold:
            break
        corr = np.abs(D.conj().T @ residual)
        corr[taken] = -1.0
        k = int(np.argmax(corr))
        taken[k] = True
        support.append(k)
        columns.append(D[:, k])
        coef = _lstsq(columns, y)
        residual = y - np.stack(columns, 1) @ coef
        trace.append(float(np.linalg.norm(residual)))
    return residual


def _lstsq(columns, y):
    A = np.stack(columns, axis=1)
    return np.linalg.lstsq(A, y, rcond=None)[0]


def hyomp_estimate(
    h_ls: np.ndarray, dicts: HybridDictionaries, cfg: HyOmpConfig, return_trace: bool = False
):
    """Two-stage OMP: ``sparsity_far`` far atoms, then ``sparsity_near`` near atoms.

    Ties in |correlation| go to the lowest column index. Coefficients are
    refit by (minimum-norm) least squares over every selected atom after
    each step.
    """
    y = np.asarray(h_ls, dtype=np.complex128)
    columns: list[np.ndarray] = []
    far_support: list[int] = []
    near_support: list[int] = []
    trace = [float(np.linalg.norm(y))]
    if dicts.far.shape[1]:
        _omp_stage(y, dicts.far, far_support, columns, cfg.sparsity_far, cfg.residual_threshold, trace)
    if dicts.near.shape[1]:
        _omp_stage(y, dicts.near, near_support, columns, cfg.sparsity_near, cfg.residual_threshold, trace)
    est = np.stack(columns, 1) @ _lstsq(columns, y) if columns else np.zeros_like(y)
    if return_trace:
        return est, {"far": far_support, "near": near_support, "residual_norms": trace}
    return est
