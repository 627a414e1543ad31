"""Dense numeric kernels shared by every other module.

Matrices are plain 2-D numpy arrays (C order, float64 by default, float32
selectable by the caller). The helpers here add the argument checking and
overflow discipline the rest of the package relies on; the heavy lifting is
numpy's.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "as_matrix",
    "matmul",
    "elementwise_exp",
    "weighted_softmax_rows",
    "Rng",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A kernel produced (or received) inf or nan."""


def as_matrix(a, dtype=np.float64) -> np.ndarray:
    """Coerce ``a`` to a 2-D contiguous float array."""
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Raises ShapeError naming both shapes on an inner-dimension mismatch.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def elementwise_exp(a: np.ndarray) -> np.ndarray:
    """exp applied entrywise; overflow to inf is an error, not a warning."""
    a = np.asarray(a)
    with np.errstate(over="ignore"):
        out = np.exp(a)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(
            f"exp overflowed (max input {float(np.max(a)):.6g})"
        )
    return out


def weighted_softmax_rows(scores: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax where key j carries a positive multiplicity weight.

    out[i, j] = weights[j] * exp(scores[i, j]) / sum_j' weights[j'] * exp(scores[i, j'])

    The row maximum is always subtracted before exponentiation, so arbitrarily
    large finite scores are safe. With all-ones weights this is the standard
    softmax bit for bit (multiplying by 1.0 is exact).
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("softmax scores contain inf or nan")
    if weights is None:
        weights = np.ones(scores.shape[1], dtype=scores.dtype)
    else:
        weights = np.asarray(weights, dtype=scores.dtype)
        if weights.shape != (scores.shape[1],):
            raise ShapeError(
                f"key weights shape {weights.shape} does not match key count {scores.shape[1]}"
            )
        if not np.all(weights > 0):
            raise ValueError("key weights must all be positive")
    shifted = scores - scores.max(axis=1, keepdims=True)
    num = np.exp(shifted) * weights
    denom = num.sum(axis=1, keepdims=True)
    return num / denom


# splitmix64 constants.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(2.0 ** -53)


class Rng:
    """Counter-based deterministic random stream (splitmix64 + Box-Muller).

    Draw i of the raw stream is a pure function of (seed, i), so identical
    seeds give identical streams regardless of call slicing history on the
    same platform and precision. Gaussian variates come from the Box-Muller
    transform applied to consecutive 53-bit uniforms.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def _raw(self, m: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + m + 1, dtype=np.uint64)
        self.counter += m
        z = self.seed + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape) -> np.ndarray:
        """Uniform samples in [0, 1) with 53-bit resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        m = int(np.prod(shape)) if shape else 1
        u = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(shape)

    def normal(self, shape, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        """Gaussian samples with mean 0 and standard deviation ``scale``.

        Computed in float64 and cast afterwards, so the float32 stream is the
        rounded float64 stream.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        m = int(np.prod(shape)) if shape else 1
        pairs = (m + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so log is finite; u2 in [0, 1).
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * _U53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        out = out[:m] * float(scale)
        return out.reshape(shape).astype(dtype, copy=False)
