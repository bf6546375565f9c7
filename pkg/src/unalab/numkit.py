"""Dense linear algebra helpers and splittable random streams.

Every stochastic routine in the package draws from an :class:`RngStream`.
Streams are backed by the counter-based Philox bit generator, so a given
seed yields the same bytes on every platform, and child streams are keyed
by hashing the parent seed with the child index (no shared state).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

_MASK64 = (1 << 64) - 1

# Relative jitter (times the mean diagonal) tried in order before giving up.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after the whole jitter ladder."""


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """Seeded random stream with deterministic, hash-keyed children.

    Normal draws use numpy's ziggurat transform of the Philox output;
    uniforms use the standard 53-bit mantissa construction.

    Parameters
    ----------
    seed : int
        Any integer; reduced modulo 2**64.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed:#x})"

    def split(self, index: int) -> "RngStream":
        """Child stream for ``index``; independent of draws already made."""
        return RngStream(_splitmix64(self.seed ^ _splitmix64(int(index) + 1)))

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def normal(self, scale=1.0, size=None) -> np.ndarray:
        return scale * self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _check_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(a, jitter: bool = True) -> np.ndarray:
    """Lower Cholesky factor of a symmetric PSD matrix.

    When the plain factorization fails, ``JITTER_LADDER[k] * mean(diag(a))``
    is added to the diagonal for successive ``k``.

    Raises
    ------
    NotPositiveDefinite
        If every rung of the ladder fails.
    """
    a = np.asarray(a, dtype=float)
    _check_symmetric(a)
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    ladder = JITTER_LADDER if jitter else JITTER_LADDER[:1]
    mean_diag = float(np.mean(np.abs(np.diag(a)))) or 1.0
    eye = np.eye(a.shape[0])
    for rel in ladder:
        try:
            low = np.linalg.cholesky(a + rel * mean_diag * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(low)) and np.all(np.diag(low) > 0):
            return low
    raise NotPositiveDefinite(
        f"matrix of size {a.shape[0]} is not positive definite "
        f"(jitter up to {ladder[-1]:g} x mean diagonal)"
    )


def cho_solve(low: np.ndarray, b) -> np.ndarray:
    """Solve ``(L L^T) x = b`` given the lower factor ``L``."""
    z = solve_triangular(low, b, lower=True, check_finite=False)
    return solve_triangular(low.T, z, lower=False, check_finite=False)


def solve_psd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric PSD ``a`` via :func:`cholesky`."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {a.shape[0]}")
    return cho_solve(cholesky(a), b)


def logdet_from_cholesky(low: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(low))))
