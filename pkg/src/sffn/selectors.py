"""Block-selection methods for sparse feed-forward memories.

Direct methods score blocks from the key table itself (VanillaM, Avg-K, the
controller, and the low-rank / product-key factorizations).  Indirect methods
use a separate gate: a static per-token hash table or learned expert
embeddings.  Every selector returns a :class:`~sffn.memory.BlockSelection`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .memory import BlockSelection, MemoryGeometry, chunk_blocks, coefficients
from .tensor import RngStream, ShapeError, gelu, matmul, softmax, topk_indices


class Aggregator(str, enum.Enum):
    AVG = "avg"
    AVG_ABS = "avgabs"
    MAX = "max"
    MIN = "min"

    def reduce(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[axis] == 0:
            raise ValueError("cannot aggregate an empty block")
        if self is Aggregator.AVG:
            return values.mean(axis=axis)
        if self is Aggregator.AVG_ABS:
            return np.abs(values).mean(axis=axis)
        if self is Aggregator.MAX:
            return values.max(axis=axis)
        return values.min(axis=axis)


def _check_keys(x, K, geometry: MemoryGeometry) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (geometry.d_m, geometry.d) or x.shape != (geometry.d,):
        raise ShapeError(f"x {x.shape} / K {K.shape} inconsistent with geometry {geometry}")
    return x, K


# -- VanillaM ---------------------------------------------------------------


def score_vanilla(x, K, geometry: MemoryGeometry, agg: Aggregator = Aggregator.AVG) -> np.ndarray:
    x, K = _check_keys(x, K, geometry)
    m = coefficients(x, K)
    return Aggregator(agg).reduce(m.reshape(geometry.B, geometry.g), axis=1)


def select_vanillam(x, K, geometry: MemoryGeometry, agg: Aggregator = Aggregator.AVG) -> BlockSelection:
    scores = score_vanilla(x, K, geometry, agg)
    return BlockSelection.hard(topk_indices(scores, geometry.b))


# -- Avg-K -----------------------------------------------------------------


def block_means(K, geometry: MemoryGeometry) -> np.ndarray:
    """Mean key of every block, shape (B, d)."""
    K = np.asarray(K, dtype=np.float64)
    return K.reshape(geometry.B, geometry.g, geometry.d).mean(axis=1)


def score_avgk(x, K, geometry: MemoryGeometry) -> np.ndarray:
    x, K = _check_keys(x, K, geometry)
    return matmul(block_means(K, geometry), x)


def select_avgk(x, K, geometry: MemoryGeometry) -> BlockSelection:
    return BlockSelection.hard(topk_indices(score_avgk(x, K, geometry), geometry.b))


# -- RandHash --------------------------------------------------------------


@dataclass(frozen=True)
class HashGateTable:
    vocab_size: int
    b: int
    n_blocks: int
    table: np.ndarray
    seed: int

    def __post_init__(self):
        table = np.array(self.table, dtype=np.int64)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)


def build_randhash(vocab_size: int, geometry: MemoryGeometry, seed: int) -> HashGateTable:
    """Assign every token type ``b`` distinct blocks drawn uniformly at random.

    Row ``t`` comes from its own sub-stream, so a token's blocks do not change
    when the vocabulary grows.
    """
    B, b = geometry.B, geometry.b
    if b > B:
        raise ValueError(f"cannot draw b={b} distinct blocks from B={B}")
    stream = RngStream(seed, "randhash")
    table = np.empty((vocab_size, b), dtype=np.int64)
    for t in range(vocab_size):
        rng = stream.generator(t)
        table[t] = np.sort(rng.choice(B, size=b, replace=False))
    return HashGateTable(vocab_size=vocab_size, b=b, n_blocks=B, table=table, seed=seed)


def select_randhash(token_id: int, table: HashGateTable) -> BlockSelection:
    if not 0 <= token_id < table.vocab_size:
        raise IndexError(f"token id {token_id} outside vocabulary of size {table.vocab_size}")
    return BlockSelection.hard(table.table[token_id])


# -- learned softmax gate (Switch) -----------------------------------------


@dataclass
class ExpertEmbeddings:
    theta: np.ndarray
    learned: bool = True

    @property
    def B(self) -> int:
        return self.theta.shape[0]


def gate_softmax(x, emb: ExpertEmbeddings) -> np.ndarray:
    if emb.B < 1:
        raise ValueError("gate needs at least one expert")
    return softmax(matmul(emb.theta, np.asarray(x, dtype=np.float64)))


def select_switch(x, emb: ExpertEmbeddings) -> BlockSelection:
    """Top-1 expert with its gate probability as the (soft) weight."""
    p = gate_softmax(x, emb)
    i = int(topk_indices(p, 1)[0])
    return BlockSelection(np.array([i]), np.array([p[i]]))


# -- key-table factorizations ----------------------------------------------


@dataclass
class BatchNorm:
    """Per-feature batch normalisation with learned affine and running stats."""

    dim: int
    eps: float = 1e-5
    momentum: float = 0.1
    gamma: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = np.ones(self.dim)
        if self.beta is None:
            self.beta = np.zeros(self.dim)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.dim)
        if self.running_var is None:
            self.running_var = np.ones(self.dim)

    def forward(self, t: np.ndarray, training: bool, update: bool = True):
        t = np.asarray(t, dtype=np.float64)
        squeeze = t.ndim == 1
        t2 = t[None, :] if squeeze else t
        if training:
            mean = t2.mean(axis=0)
            var = t2.var(axis=0)
            if update:
                n = t2.shape[0]
                unbiased = var * n / max(n - 1, 1)
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (t2 - mean) * inv_std
        out = self.gamma * xhat + self.beta
        cache = (xhat, inv_std, training)
        return (out[0] if squeeze else out), cache

    def backward(self, dout: np.ndarray, cache):
        xhat, inv_std, training = cache
        dgamma = (dout * xhat).sum(axis=0)
        dbeta = dout.sum(axis=0)
        dxhat = dout * self.gamma
        if not training:
            return dxhat * inv_std, dgamma, dbeta
        n = dout.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta


@dataclass
class LowRankKeys:
    """``K^T = D . Kt^T`` with ``D`` (d, d_l) and ``Kt`` (d_m, d_l)."""

    D: np.ndarray
    Kt: np.ndarray
    batch_norm: bool = False
    bn: BatchNorm | None = None

    def __post_init__(self):
        if self.D.shape[1] != self.Kt.shape[1]:
            raise ShapeError(f"rank mismatch: D {self.D.shape}, Kt {self.Kt.shape}")
        if self.batch_norm and self.bn is None:
            self.bn = BatchNorm(self.d_l)

    @property
    def d_l(self) -> int:
        return self.D.shape[1]

    def materialize(self) -> np.ndarray:
        """The implied full key table, shape (d_m, d)."""
        return matmul(self.D, self.Kt.T).T


def _project(x, D, bn: BatchNorm | None, training: bool) -> np.ndarray:
    t = matmul(np.asarray(x, dtype=np.float64), D)
    if bn is not None:
        t, _ = bn.forward(t, training=training, update=False)
    return t


def lorkm_scores(x, lr: LowRankKeys, training: bool = False) -> np.ndarray:
    t = _project(x, lr.D, lr.bn if lr.batch_norm else None, training)
    return gelu(matmul(lr.Kt, t))


@dataclass
class ProductKeys:
    """Product-key table: key ``i`` is ``[C[i // r], C2[i % r]]`` with ``r = sqrt(d_m)``."""

    D: np.ndarray
    C: np.ndarray
    C2: np.ndarray
    batch_norm: bool = True
    bn: BatchNorm | None = None

    def __post_init__(self):
        d_l = self.D.shape[1]
        if d_l % 2:
            raise ValueError(f"product keys need an even rank, got d_l={d_l}")
        if self.C.shape != self.C2.shape or self.C.shape[1] != d_l // 2:
            raise ShapeError(f"sub-key tables {self.C.shape}, {self.C2.shape} do not split rank {d_l}")
        if self.batch_norm and self.bn is None:
            self.bn = BatchNorm(d_l)

    @property
    def r(self) -> int:
        return self.C.shape[0]

    @property
    def d_m(self) -> int:
        return self.r * self.r

    @property
    def d_l(self) -> int:
        return self.D.shape[1]

    @classmethod
    def init(cls, d: int, d_m: int, d_l: int, rng: np.random.Generator, batch_norm: bool = True,
             scale: float | None = None) -> "ProductKeys":
        r = math.isqrt(d_m)
        if r * r != d_m:
            raise ValueError(f"product keys need a square memory size, got d_m={d_m}")
        scale = 1.0 / math.sqrt(d) if scale is None else scale
        return cls(
            D=rng.normal(0, scale, (d, d_l)),
            C=rng.normal(0, 1.0 / math.sqrt(d_l), (r, d_l // 2)),
            C2=rng.normal(0, 1.0 / math.sqrt(d_l), (r, d_l // 2)),
            batch_norm=batch_norm,
        )

    def key_index(self, i: int) -> tuple[int, int]:
        return divmod(i, self.r)

    def materialize(self) -> np.ndarray:
        """Low-rank keys ``[c_{i//r}, c'_{i%r}]`` for every cell, shape (d_m, d_l)."""
        r = self.r
        return np.concatenate([np.repeat(self.C, r, axis=0), np.tile(self.C2, (r, 1))], axis=1)


def pkm_pre_activations(x, pk: ProductKeys, training: bool = False) -> np.ndarray:
    t = _project(x, pk.D, pk.bn if pk.batch_norm else None, training)
    half = pk.d_l // 2
    s = matmul(pk.C, t[:half])
    s2 = matmul(pk.C2, t[half:])
    return (s[:, None] + s2[None, :]).reshape(-1)


def pkm_scores(x, pk: ProductKeys, training: bool = False) -> np.ndarray:
    return gelu(pkm_pre_activations(x, pk, training))


def select_pkm_ffn(x, pk: ProductKeys, k: int) -> BlockSelection:
    """Top-``k`` cells by product-key coefficient, weighted by that coefficient."""
    if k > pk.d_m:
        raise ValueError(f"k={k} exceeds memory size {pk.d_m}")
    m = pkm_scores(x, pk)
    idx = topk_indices(m, k)
    return BlockSelection(idx, m[idx])


# -- controller and approximate search ------------------------------------


def select_controller(x, K, geometry: MemoryGeometry, controller: LowRankKeys | None = None) -> BlockSelection:
    """One cell per block: the argmax of the (controller or raw) dot products.

    Indices are cell ids.  Without a controller the weight is 1; with one it
    is the controller score of the chosen cell.
    """
    x, K = _check_keys(x, K, geometry)
    if controller is None:
        scores = matmul(K, x)
    else:
        t = _project(x, controller.D, controller.bn if controller.batch_norm else None, False)
        scores = matmul(controller.Kt, t)
    cells = []
    for i, block in enumerate(chunk_blocks(scores[:, None], geometry.g)):
        cells.append(i * geometry.g + int(topk_indices(block[:, 0], 1)[0]))
    idx = np.array(cells, dtype=np.int64)
    weights = np.ones(len(idx)) if controller is None else scores[idx]
    return BlockSelection(idx, weights)


def select_naive_ann(scores, k: int, sabotage_pct: float, rng: np.random.Generator) -> BlockSelection:
    """Exact top-``k`` with ``floor(n * k / 100)`` members swapped for random non-members."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= sabotage_pct <= 100:
        raise ValueError(f"sabotage percentage must be in [0, 100], got {sabotage_pct}")
    top = topk_indices(scores, k)
    n_swap = int(math.floor(sabotage_pct * k / 100))
    outside = np.setdiff1d(np.arange(len(scores)), top)
    n_swap = min(n_swap, len(outside))
    if n_swap == 0:
        return BlockSelection.hard(top)
    evict = rng.choice(len(top), size=n_swap, replace=False)
    incoming = rng.choice(outside, size=n_swap, replace=False)
    kept = np.delete(top, evict)
    return BlockSelection.hard(np.sort(np.concatenate([kept, incoming])))
