"""Complex linear algebra helpers and seeded random sampling.

Complex vectors and matrices are plain ``numpy.complex128`` arrays. Random
streams come from :class:`Rng`, a thin wrapper over numpy's PCG64 bit
generator, whose output stream is fixed by the seed on every platform.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a Hermitian system cannot be solved by Cholesky."""


class Rng:
    """Seeded random stream (PCG64 + numpy's ziggurat normal sampler).

    Instances are single-owner. Use one instance per independent stream,
    e.g. one per dataset sample.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def sample_complex_gaussian(rng: Rng, n: int, variance: float = 1.0) -> np.ndarray:
    """Draw ``n`` i.i.d. circularly symmetric CN(0, variance) samples.

    Real parts for all ``n`` samples are drawn first, then imaginary parts,
    each with variance ``variance / 2``.
    """
    if int(n) < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not variance > 0:
        raise ValueError(f"variance must be > 0, got {variance}")
    scale = np.sqrt(variance / 2.0)
    parts = rng.normal((2, int(n))) * scale
    return parts[0] + 1j * parts[1]


def hermitian_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for Hermitian positive-definite ``A`` via Cholesky.

    ``B`` may be a vector or a matrix with ``A.shape[0]`` rows.

    Raises
    ------
    SingularMatrixError
        If ``A`` is not square, ``B`` does not conform, or a Cholesky pivot
        falls below ``1e-12`` times the largest diagonal entry.
    """
    A = np.asarray(A, dtype=np.complex128)
    B = np.asarray(B, dtype=np.complex128)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SingularMatrixError(f"A must be square, got shape {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise SingularMatrixError(
            f"dimension mismatch: A is {A.shape}, B has {B.shape[0]} rows"
        )
    diag_max = float(np.max(np.abs(np.diag(A).real))) if A.size else 0.0
    if diag_max <= 0:
        raise SingularMatrixError("A has no positive diagonal entry")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"Cholesky factorization failed: {exc}") from exc
    pivots = np.abs(np.diag(L)) ** 2
    if np.min(pivots) < 1e-12 * diag_max:
        raise SingularMatrixError(
            f"numerically singular: pivot {np.min(pivots):.3e} < 1e-12 * {diag_max:.3e}"
        )
    Y = solve_triangular(L, B, lower=True, check_finite=False)
    return solve_triangular(L.conj().T, Y, lower=False, check_finite=False)


def dft_matrix(M: int) -> np.ndarray:
    """Unitary M x M DFT dictionary.

    Column ``k`` is the far-field steering vector at ``sin(theta) = -1 + 2k/M``
    (half-wavelength spacing), so the columns are orthonormal.
    """
    if int(M) < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    M = int(M)
    m = np.arange(M)[:, None]
    sin_grid = -1.0 + 2.0 * np.arange(M)[None, :] / M
    return np.exp(-1j * np.pi * m * sin_grid) / np.sqrt(M)
