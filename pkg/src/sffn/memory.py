"""Blocked key/value memory: the FFN seen as ``d_m`` memory cells.

A cell is a key row ``k_i`` and a value row ``v_i``; its coefficient for an
input ``x`` is ``gelu(x . k_i)``.  Cells are grouped into ``B = d_m / g``
contiguous blocks of ``g`` cells, and a selection picks ``b = k / g`` blocks
with a weight each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, gelu, matmul


@dataclass(frozen=True)
class MemoryGeometry:
    d: int
    d_m: int
    g: int
    k: int

    def __post_init__(self):
        for name in ("d", "d_m", "g", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_m % self.g:
            raise ValueError(f"block size g={self.g} does not divide d_m={self.d_m}")
        if self.k % self.g:
            raise ValueError(f"block size g={self.g} does not divide k={self.k}")
        if self.k > self.d_m:
            raise ValueError(f"k={self.k} exceeds d_m={self.d_m}")

    @classmethod
    def from_multiplier(cls, d: int, E: int, g: int, k: int) -> "MemoryGeometry":
        return cls(d=d, d_m=E * 4 * d, g=g, k=k)

    @property
    def B(self) -> int:
        return self.d_m // self.g

    @property
    def b(self) -> int:
        return self.k // self.g

    @property
    def E(self) -> float:
        return self.d_m / (4 * self.d)

    def cells(self) -> "MemoryGeometry":
        """The same memory viewed at cell granularity (g = 1)."""
        return MemoryGeometry(self.d, self.d_m, 1, self.k)

    def block_cells(self, block: int) -> range:
        return range(block * self.g, (block + 1) * self.g)


@dataclass(frozen=True)
class BlockSelection:
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if idx.shape != w.shape:
            raise ValueError("indices and weights differ in length")
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"duplicate block indices in selection {idx.tolist()}")
        if not np.all(np.isfinite(w)):
            raise ValueError("selection weights must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def hard(cls, indices) -> "BlockSelection":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(idx, np.ones(len(idx)))

    @classmethod
    def empty(cls) -> "BlockSelection":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.indices)

    def validate(self, n_blocks: int, size: int | None = None) -> None:
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n_blocks):
            raise IndexError(f"block index out of range [0, {n_blocks}): {self.indices.tolist()}")
        if size is not None and len(self.indices) != size:
            raise ValueError(f"selection has {len(self.indices)} blocks, expected {size}")

    def scaled(self, c: float) -> "BlockSelection":
        return BlockSelection(self.indices, self.weights * c)

    def union(self, other: "BlockSelection") -> "BlockSelection":
        return BlockSelection(
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.weights, other.weights]),
        )


def _check_tables(x, K, V) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if x.ndim != 1 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("expected x: (d,), K: (d_m, d), V: (d_m, d)")
    if K.shape[1] != x.shape[0]:
        raise ShapeError(f"key width {K.shape[1]} != input width {x.shape[0]}")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"key table has {K.shape[0]} rows, value table {V.shape[0]}")
    return x, K, V


def coefficients(x, K) -> np.ndarray:
    """Memory coefficients ``gelu(x . k_i)`` for every row of ``K``."""
    return gelu(matmul(K, x))


def dense_ffn(x, K, V) -> np.ndarray:
    """``gelu(x K^T) V``, summed over cells in ascending order."""
    x, K, V = _check_tables(x, K, V)
    return matmul(coefficients(x, K), V)


def chunk_blocks(T, g: int) -> list[np.ndarray]:
    T = np.asarray(T, dtype=np.float64)
    if g <= 0 or T.shape[0] % g:
        raise ValueError(f"block size {g} does not divide {T.shape[0]} rows")
    return [T[i : i + g] for i in range(0, T.shape[0], g)]


def selection_cells(sel: BlockSelection, geometry: MemoryGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Cell ids and per-cell weights of a selection, in ascending block order."""
    order = np.argsort(sel.indices, kind="stable")
    blocks = sel.indices[order]
    w = sel.weights[order]
    g = geometry.g
    cells = (blocks[:, None] * g + np.arange(g)[None, :]).reshape(-1)
    return cells, np.repeat(w, g)


def sparse_apply(x, K, V, sel: BlockSelection, geometry: MemoryGeometry) -> np.ndarray:
    """Output of the memory restricted to the selected blocks.

    Cells are accumulated in ascending block then cell order with coefficient
    ``weight * gelu(x . k)``; with every block selected at weight 1 this is
    the same floating-point computation as :func:`dense_ffn`.
    """
    x, K, V = _check_tables(x, K, V)
    if K.shape != (geometry.d_m, geometry.d):
        raise ShapeError(f"tables {K.shape} do not match geometry ({geometry.d_m}, {geometry.d})")
    sel.validate(geometry.B)
    if len(sel) == 0:
        return np.zeros(geometry.d)
    cells, w = selection_cells(sel, geometry)
    m = coefficients(x, K[cells])
    return matmul(w * m, V[cells])


def _check_experts(experts: Sequence[tuple[np.ndarray, np.ndarray]], gate_weights) -> np.ndarray:
    gate = np.asarray(gate_weights, dtype=np.float64).reshape(-1)
    if len(experts) != len(gate):
        raise ValueError(f"{len(experts)} experts but {len(gate)} gate weights")
    shapes = {np.shape(Ki) for Ki, _ in experts} | {np.shape(Vi) for _, Vi in experts}
    if len(shapes) > 1:
        raise ShapeError(f"experts disagree in shape: {sorted(shapes)}")
    return gate


def moe_standard(x, experts, gate_weights) -> np.ndarray:
    """Mixture of experts: ``sum_i g_i(x) * FFN_i(x)``."""
    gate = _check_experts(experts, gate_weights)
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x)
    for gi, (Ki, Vi) in zip(gate, experts):
        y = y + gi * dense_ffn(x, Ki, Vi)
    return y


def moe_as_memory(x, experts, gate_weights) -> np.ndarray:
    """The same mixture written as one wide memory with gated coefficients."""
    gate = _check_experts(experts, gate_weights)
    x = np.asarray(x, dtype=np.float64)
    K = np.concatenate([np.asarray(Ki, dtype=np.float64) for Ki, _ in experts])
    V = np.concatenate([np.asarray(Vi, dtype=np.float64) for _, Vi in experts])
    x, K, V = _check_tables(x, K, V)
    g = K.shape[0] // len(experts)
    m = np.repeat(gate, g) * coefficients(x, K)
    return matmul(m, V)
