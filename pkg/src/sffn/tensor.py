"""Small deterministic dense numerics used by the memory layer and selectors.

Everything here works on float64 numpy arrays.  ``matmul`` accumulates over
the inner dimension strictly left to right, so the value of any single output
entry depends only on the row of ``a`` and column of ``b`` that produce it,
never on how many other rows or columns are present.  The layer code relies
on that to get bit-identical results between the dense and the blocked paths.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order.

    1-D inputs are treated as row (for ``a``) or column (for ``b``) vectors and
    the corresponding axis is dropped from the result, like ``numpy.matmul``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    squeeze_rows = a.ndim == 1
    squeeze_cols = b.ndim == 1
    a2 = a[None, :] if squeeze_rows else a
    b2 = b[:, None] if squeeze_cols else b
    if a2.ndim != 2 or b2.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: ({a2.shape[0]}x{a2.shape[1]}) @ "
            f"({b2.shape[0]}x{b2.shape[1]}); inner dims {a2.shape[1]} != {b2.shape[0]}"
        )
    out = np.zeros((a2.shape[0], b2.shape[1]))
    for p in range(a2.shape[1]):
        out += a2[:, p : p + 1] * b2[p : p + 1, :]
    if squeeze_rows:
        out = out[0]
    if squeeze_cols:
        out = out[..., 0]
    return out


def gelu(x):
    """Exact GeLU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / SQRT2))


def gelu_grad(x, cdf=None):
    """Derivative of :func:`gelu`; pass ``cdf`` to reuse a forward-pass value."""
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = normal_cdf(x)
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty sequence")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lowest index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ShapeError("topk_indices expects a 1-D score vector")
    n = scores.shape[0]
    if k < 0 or k > n:
        raise ValueError(f"k={k} out of range for {n} scores")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise ``topk_indices`` for a (tokens, n) score matrix.

    Uses a partition to find each row's k-th largest value, then admits tied
    entries in index order, so the result matches the stable-sort definition.
    """
    scores = np.asarray(scores, dtype=np.float64)
    N, n = scores.shape
    if k < 0 or k > n:
        raise ValueError(f"k={k} out of range for {n} scores")
    if k == 0:
        return np.zeros((N, 0), dtype=np.int64)
    kth = np.partition(scores, n - k, axis=1)[:, n - k : n - k + 1]
    above = scores > kth
    tied = scores == kth
    need = k - above.sum(axis=1, keepdims=True)
    mask = above | (tied & (np.cumsum(tied, axis=1) <= need))
    return np.nonzero(mask)[1].reshape(N, k)


def finite_diff_grad(f: Callable[[np.ndarray], float], at, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _tag_words(tag: str) -> list[int]:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class RngStream:
    """A named, counter-addressed random stream.

    The generator for ``(seed, tag, counter)`` is a PCG64 seeded from a
    ``SeedSequence`` over the seed, a hash of the tag and the counter, so it
    does not depend on process state or platform.
    """

    seed: int
    tag: str
    counter: int = 0

    def generator(self, *extra: int) -> np.random.Generator:
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        words += _tag_words(self.tag)
        words += [self.counter, *extra]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, tag: str) -> "RngStream":
        return RngStream(self.seed, f"{self.tag}/{tag}", self.counter)

    def at(self, counter: int) -> "RngStream":
        return RngStream(self.seed, self.tag, counter)
