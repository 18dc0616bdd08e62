"""Dense linear algebra, seeded RNG streams and finite differences.

All arithmetic is float64. Reductions that feed model outputs use a fixed
accumulation order so that results do not depend on batch size, BLAS
threading or which simulated worker runs them.

RNG: numpy's PCG64 bit generator seeded through ``SeedSequence``. PCG64 is
a fully specified algorithm with a platform-independent output stream, so a
seed reproduces the same draws on every machine.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import EvaluationError, PreconditionError, ShapeError


def as_matrix(values) -> np.ndarray:
    """Return ``values`` as a 2-D float64 array, checking finiteness."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EvaluationError("matrix contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with left-to-right accumulation over the inner index.

    ``out[i, j] = ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, evaluated exactly
    like a naive triple loop, so a row of ``a`` gives the same bits whether it
    is multiplied alone or inside a larger batch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(a.shape[1]):
            out += a[:, k : k + 1] * b[k : k + 1, :]
    if not np.all(np.isfinite(out)):
        raise EvaluationError("matmul produced non-finite entries")
    return out


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def finite_diff_gradient(
    fn: Callable[[np.ndarray], float], x, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not eps > 0:
        raise PreconditionError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64, ndmin=1)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise EvaluationError(f"fn is not finite near coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def _key_words(key) -> list[int]:
    if isinstance(key, (int, np.integer)):
        return [int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, *keys) -> np.random.Generator:
    """A PCG64 generator for the stream identified by ``(seed, *keys)``.

    Keys may be ints or strings; strings are hashed with SHA-256 so the
    stream depends only on their text, never on Python's hash seed.
    """
    if seed < 0 or seed >= 2**64:
        raise PreconditionError(f"seed must be a 64-bit unsigned int, got {seed}")
    entropy = [seed & 0xFFFFFFFF, seed >> 32]
    for key in keys:
        entropy.extend(_key_words(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
