"""Hybrid-field ULA channels, LS pilot observations and dataset files.

Far-field paths use planar-wave steering vectors; near-field paths use the
exact spherical-wave distance from the scatterer to every antenna. Both
vectors share one antenna ordering and phase reference (antenna 0), so the
near-field response converges entry-wise to the far-field one as r grows.
"""

from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from xlce.numerics import Rng, sample_complex_gaussian

_ANGLE_TOL = 1e-12
XCED_MAGIC = b"XCED1\n"


class DegenerateChannelError(ValueError):
    """Raised when a channel with zero energy is normalized."""


class DatasetFormatError(ValueError):
    """Raised for malformed or truncated XCED1 files."""


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array with half-wavelength spacing."""

    M: int
    wavelength: float = 0.01
    spacing: float | None = None

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        half = self.wavelength / 2.0
        if self.spacing is None:
            object.__setattr__(self, "spacing", half)
        elif not np.isclose(self.spacing, half, rtol=1e-12, atol=0.0):
            raise ValueError(
                f"antenna spacing must be wavelength/2 = {half}, got {self.spacing}"
            )

    @property
    def delta(self) -> np.ndarray:
        """Centered element offsets (2m - M - 1)/2 for m = 1..M."""
        m = np.arange(1, self.M + 1)
        return (2.0 * m - self.M - 1) / 2.0

    @property
    def is_square(self) -> bool:
        s = int(round(np.sqrt(self.M)))
        return s * s == self.M


class PathKind(enum.Enum):
    FAR = "far"
    NEAR = "near"


@dataclass(frozen=True)
class PathParams:
    kind: PathKind
    theta: float
    gain: complex
    r: float | None = None

    def __post_init__(self):
        _check_angle(self.theta)
        if self.kind is PathKind.NEAR:
            if self.r is None or not self.r > 0:
                raise ValueError(f"near-field path needs r > 0, got {self.r}")
        elif self.r is not None:
            raise ValueError("far-field path must not carry a distance")


@dataclass
class ChannelSample:
    h_true: np.ndarray
    h_ls: np.ndarray
    snr_linear: float
    paths: list[PathParams] = field(default_factory=list)
    seed: int = 0

    @property
    def snr_db(self) -> float:
        return 10.0 * np.log10(self.snr_linear)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a reproducible dataset; sample i is drawn from seed base_seed + i.

    ``snr_db`` is either a fixed value or a ``(low, high)`` range sampled
    uniformly in dB per sample.
    """

    array: ArrayConfig
    L: int = 6
    L0: int = 1
    r_range: tuple[float, float] = (10.0, 80.0)
    snr_db: float | tuple[float, float] = (-5.0, 20.0)
    n_samples: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not 0 <= self.L0 <= self.L:
            raise ValueError(f"L0 must lie in [0, L={self.L}], got {self.L0}")
        lo, hi = self.r_range
        if not 0 < lo <= hi or not np.isfinite(hi):
            raise ValueError(f"r_range must satisfy 0 < r_min <= r_max < inf, got {self.r_range}")
        if isinstance(self.snr_db, (tuple, list)):
            if len(self.snr_db) != 2 or self.snr_db[0] > self.snr_db[1]:
                raise ValueError(f"snr_db range must be (low, high), got {self.snr_db}")
            object.__setattr__(self, "snr_db", (float(self.snr_db[0]), float(self.snr_db[1])))
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.base_seed < 0:
            raise ValueError("base_seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "M": self.array.M,
            "wavelength": self.array.wavelength,
            "L": self.L,
            "L0": self.L0,
            "r_range": list(self.r_range),
            "snr_db": list(self.snr_db) if isinstance(self.snr_db, tuple) else self.snr_db,
            "n_samples": self.n_samples,
            "base_seed": self.base_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        snr = d["snr_db"]
        return cls(
            array=ArrayConfig(int(d["M"]), float(d["wavelength"])),
            L=int(d["L"]),
            L0=int(d["L0"]),
            r_range=tuple(float(v) for v in d["r_range"]),
            snr_db=tuple(snr) if isinstance(snr, list) else float(snr),
            n_samples=int(d["n_samples"]),
            base_seed=int(d["base_seed"]),
        )


def _check_angle(theta: float):
    if not -np.pi / 2 - _ANGLE_TOL <= theta <= np.pi / 2 + _ANGLE_TOL:
        raise ValueError(f"theta must lie in [-pi/2, pi/2], got {theta}")


def rayleigh_distance(array: ArrayConfig) -> float:
    """Rayleigh distance M^2 * wavelength / 2 of a half-wavelength ULA."""
    return array.M**2 * array.wavelength / 2.0


def steer_far(array: ArrayConfig, theta: float) -> np.ndarray:
    """Planar-wave response, entry m = exp(-j 2 pi (d/lambda) m sin(theta)) / sqrt(M)."""
    _check_angle(theta)
    m = np.arange(array.M)
    phase = -2.0 * np.pi * (array.spacing / array.wavelength) * m * np.sin(theta)
    return np.exp(1j * phase) / np.sqrt(array.M)


def steer_near(array: ArrayConfig, theta: float, r: float) -> np.ndarray:
    """Spherical-wave response for a scatterer at angle ``theta``, range ``r``.

    Antenna m (0-based) sits at offset ``x_m = -delta_{m+1} * d`` from the
    array centre, and its distance to the scatterer is
    ``sqrt(r^2 + x_m^2 - 2 r x_m sin(theta))``. Phases are referenced to
    antenna 0, which makes the r -> inf limit equal :func:`steer_far`.
    """
    _check_angle(theta)
    if not r > 0:
        raise ValueError(f"r must be > 0, got {r}")
    x = -array.delta * array.spacing
    s = np.sin(theta)
    # r_m - r computed without cancellation: (x^2 - 2 r x s) / (r_m + r)
    num = x * x - 2.0 * r * x * s
    excess = num / (np.sqrt(r * r + num) + r)
    phase = -2.0 * np.pi / array.wavelength * (excess - excess[0])
    return np.exp(1j * phase) / np.sqrt(array.M)


def gen_hybrid_channel(array: ArrayConfig, paths: Sequence[PathParams]) -> np.ndarray:
    """Superpose far- and near-field paths, scaled by sqrt(M / L)."""
    if len(paths) == 0:
        raise ValueError("at least one path is required")
    h = np.zeros(array.M, dtype=np.complex128)
    for p in paths:
        if p.kind is PathKind.FAR:
            h += p.gain * steer_far(array, p.theta)
        else:
            h += p.gain * steer_near(array, p.theta, p.r)
    return np.sqrt(array.M / len(paths)) * h


def normalize_power(h: np.ndarray) -> np.ndarray:
    """Scale ``h`` so that ||h||^2 = len(h)."""
    h = np.asarray(h, dtype=np.complex128)
    norm = np.linalg.norm(h)
    if not norm > 0:
        raise DegenerateChannelError("cannot normalize a zero channel")
    return h * (np.sqrt(h.size) / norm)


def observe_ls(h: np.ndarray, snr_linear: float, rng: Rng) -> np.ndarray:
    """LS estimate h + n / sqrt(P) with n ~ CN(0, I) and pilot power P = snr_linear."""
    if not snr_linear > 0:
        raise ValueError(f"snr_linear must be > 0, got {snr_linear}")
    h = np.asarray(h, dtype=np.complex128)
    n = sample_complex_gaussian(rng, h.size, 1.0)
    return h + n / np.sqrt(snr_linear)


def draw_paths(rng: Rng, L: int, L0: int, r_range: tuple[float, float]) -> list[PathParams]:
    """Draw L0 far paths followed by L - L0 near paths.

    Stream order: L angles, then L - L0 ranges, then L complex gains.
    """
    thetas = rng.uniform(-np.pi / 2, np.pi / 2, L)
    rs = rng.uniform(r_range[0], r_range[1], L - L0)
    gains = sample_complex_gaussian(rng, L, 1.0)
    paths = [PathParams(PathKind.FAR, float(thetas[l]), complex(gains[l])) for l in range(L0)]
    paths += [
        PathParams(PathKind.NEAR, float(thetas[l]), complex(gains[l]), float(rs[l - L0]))
        for l in range(L0, L)
    ]
    return paths


def make_sample(spec: DatasetSpec, index: int) -> ChannelSample:
    """Generate sample ``index`` of ``spec`` from seed ``base_seed + index`` alone."""
    seed = spec.base_seed + index
    rng = Rng(seed)
    paths = draw_paths(rng, spec.L, spec.L0, spec.r_range)
    h = normalize_power(gen_hybrid_channel(spec.array, paths))
    if isinstance(spec.snr_db, tuple):
        snr_db = rng.uniform(*spec.snr_db)
    else:
        snr_db = spec.snr_db
    snr = float(10.0 ** (snr_db / 10.0))
    h_ls = observe_ls(h, snr, rng)
    return ChannelSample(h, h_ls, snr, paths, seed)


def make_dataset(spec: DatasetSpec) -> list[ChannelSample]:
    return [make_sample(spec, i) for i in range(spec.n_samples)]


def stack_samples(samples: Sequence[ChannelSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (h_true [N, M], h_ls [N, M], snr_linear [N])."""
    h = np.stack([s.h_true for s in samples])
    h_ls = np.stack([s.h_ls for s in samples])
    snr = np.array([s.snr_linear for s in samples], dtype=np.float64)
    return h, h_ls, snr


def reobserve(samples: Sequence[ChannelSample], snr_db: float, noise_seed: int) -> list[ChannelSample]:
    """Fresh LS observations of the same channels at a fixed SNR.

    Noise for sample i comes from seed ``noise_seed + i``.
    """
    snr = float(10.0 ** (snr_db / 10.0))
    out = []
    for i, s in enumerate(samples):
        h_ls = observe_ls(s.h_true, snr, Rng(noise_seed + i))
        out.append(ChannelSample(s.h_true, h_ls, snr, s.paths, s.seed))
    return out


def atomic_write(path: Path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, spec: DatasetSpec, samples: Sequence[ChannelSample], extra: dict | None = None):
    """Write samples in the XCED1 layout.

    Layout: ``XCED1\\n``, one JSON header line, then per sample a
    little-endian float64 SNR followed by h_true and h_ls as interleaved
    (re, im) float64 pairs.
    """
    M = spec.array.M
    header = {"spec": spec.to_dict(), "M": M, "count": len(samples)}
    if extra:
        header["extra"] = extra
    chunks = [XCED_MAGIC, json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"]
    for s in samples:
        if s.h_true.shape != (M,) or s.h_ls.shape != (M,):
            raise ValueError(f"sample {s.seed} does not have length M={M}")
        block = np.empty(1 + 4 * M, dtype="<f8")
        block[0] = s.snr_linear
        block[1 : 1 + 2 * M] = np.asarray(s.h_true, dtype=np.complex128).view(np.float64)
        block[1 + 2 * M :] = np.asarray(s.h_ls, dtype=np.complex128).view(np.float64)
        chunks.append(block.tobytes())
    atomic_write(Path(path), b"".join(chunks))


def read_dataset(path) -> tuple[DatasetSpec, list[ChannelSample], dict]:
    """Read an XCED1 file; returns (spec, samples, header).

    Path metadata is not stored on disk, so loaded samples carry an empty
    ``paths`` list.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(XCED_MAGIC):
        raise DatasetFormatError(f"{path}: bad magic, expected {XCED_MAGIC!r}")
    nl = raw.find(b"\n", len(XCED_MAGIC))
    if nl < 0:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[len(XCED_MAGIC) : nl].decode("utf-8"))
        spec = DatasetSpec.from_dict(header["spec"])
        M, count = int(header["M"]), int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: malformed header: {exc}") from exc
    body = raw[nl + 1 :]
    block_bytes = 8 * (1 + 4 * M)
    if len(body) != count * block_bytes:
        raise DatasetFormatError(
            f"{path}: expected {count} blocks of {block_bytes} bytes, got {len(body)} bytes"
        )
    data = np.frombuffer(body, dtype="<f8").reshape(count, 1 + 4 * M).astype(np.float64)
    samples = []
    for i in range(count):
        row = data[i]
        h = row[1 : 1 + 2 * M].copy().view(np.complex128)
        h_ls = row[1 + 2 * M :].copy().view(np.complex128)
        samples.append(ChannelSample(h, h_ls, float(row[0]), [], spec.base_seed + i))
    return spec, samples, header

