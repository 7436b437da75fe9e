"""Batched S-FFN layers with hand-written backward passes.

A layer maps token representations ``X`` (N, d) to ``Y`` (N, d).  Every
variant reduces to the same cell-level computation::

    H = X K^T            (or a factorized pre-activation)
    M = W * gelu(H)      W: per-cell weights implied by the selection
    Y = M V

so the forward pass differs only in how ``W`` is built.  Selections are
treated as constants in the backward pass; soft weights (Switch gate
probability, PKM-FFN coefficients, controller scores) carry gradient into
their gate parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .memory import MemoryGeometry
from .selectors import Aggregator, BatchNorm, build_randhash, select_naive_ann
from .tensor import RngStream, gelu_grad, normal_cdf, softmax, topk_rows

KINDS = (
    "dense",
    "vanillam",
    "avgk",
    "randhash",
    "switch",
    "lorkm",
    "pkm",
    "pkm_ffn",
    "controller",
    "naive_ann",
)
FULL_KEY_KINDS = {"dense", "vanillam", "avgk", "randhash", "switch", "pkm_ffn", "controller", "naive_ann"}
FULL_ACTIVATION_KINDS = {"dense", "vanillam", "naive_ann"}
BLOCK_KINDS = {"vanillam", "avgk", "randhash", "switch"}
EXPERT_PARAMS = ("K", "V")


@dataclass
class SelectorSpec:
    kind: str = "dense"
    aggregator: str = "avg"
    d_l: int = 16
    batch_norm: bool | None = None
    sabotage_pct: float = 0.0
    controller: str = "vanilla"
    aux_weight: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown selector kind {self.kind!r}; expected one of {KINDS}")
        Aggregator(self.aggregator)
        if self.controller not in ("vanilla", "lowrank"):
            raise ValueError(f"controller must be 'vanilla' or 'lowrank', got {self.controller!r}")
        if self.batch_norm is None:
            # PKM-style tables normalize the projection; LoRKM does not
            self.batch_norm = self.kind in ("pkm", "pkm_ffn")


@dataclass
class Selection:
    """Frozen routing decision for a batch of tokens.

    ``blocks`` (N, b) for block selectors, ``cells`` (N, c) for cell-level
    ones; exactly one is set except for the dense layer, where both are None.
    """

    blocks: np.ndarray | None = None
    cells: np.ndarray | None = None

    def block_ids(self, geometry: MemoryGeometry) -> np.ndarray | None:
        if self.blocks is not None:
            return self.blocks
        if self.cells is not None:
            return self.cells // geometry.g if geometry.g > 1 else self.cells
        return None


@dataclass
class LayerCache:
    X: np.ndarray
    selection: Selection
    W: np.ndarray | None
    H: np.ndarray | None = None
    A: np.ndarray | None = None
    M: np.ndarray | None = None
    extra: dict = field(default_factory=dict)
    aux_loss: float = 0.0


class MemoryLayer:
    """One key/value memory with a pluggable block selector."""

    def __init__(self, geometry: MemoryGeometry, spec: SelectorSpec, rng: np.random.Generator,
                 vocab_size: int = 256, seed: int = 0, init_std: float = 0.02):
        self.geometry = geometry
        self.spec = spec
        self.kind = spec.kind
        self.seed = seed
        g = geometry
        self.params: dict[str, np.ndarray] = {}
        self.bn: BatchNorm | None = None
        self.hash_table = None

        if self.kind == "dense" and g.k != g.d_m:
            raise ValueError("a dense layer activates every cell (k must equal d_m)")
        if self.kind in ("pkm_ffn", "lorkm", "pkm", "naive_ann") and g.g != 1:
            raise ValueError(f"{self.kind} selects individual cells (g must be 1)")
        if self.kind == "controller" and g.k != g.B:
            raise ValueError("the controller activates one cell per block (k must equal B)")

        if self.kind in FULL_KEY_KINDS:
            self.params["K"] = rng.normal(0, init_std, (g.d_m, g.d))
        self.params["V"] = rng.normal(0, init_std, (g.d_m, g.d))

        if self.kind == "switch":
            self.params["theta"] = rng.normal(0, init_std, (g.B, g.d))
        if self.kind == "randhash":
            self.hash_table = build_randhash(vocab_size, g, seed)
        if self.kind in ("pkm", "pkm_ffn"):
            r = math.isqrt(g.d_m)
            if r * r != g.d_m:
                raise ValueError(f"product keys need a square memory size, got d_m={g.d_m}")
            if spec.d_l % 2:
                raise ValueError(f"product keys need an even rank, got d_l={spec.d_l}")
            self.params["D"] = rng.normal(0, 1.0 / math.sqrt(g.d), (g.d, spec.d_l))
            self.params["C"] = rng.normal(0, 1.0 / math.sqrt(spec.d_l), (r, spec.d_l // 2))
            self.params["C2"] = rng.normal(0, 1.0 / math.sqrt(spec.d_l), (r, spec.d_l // 2))
        if self.kind == "lorkm" or (self.kind == "controller" and spec.controller == "lowrank"):
            self.params["D"] = rng.normal(0, 1.0 / math.sqrt(g.d), (g.d, spec.d_l))
            self.params["Kt"] = rng.normal(0, 1.0 / math.sqrt(spec.d_l), (g.d_m, spec.d_l))
        if "D" in self.params and spec.batch_norm:
            self.bn = BatchNorm(spec.d_l)
            self.params["bn_gamma"] = self.bn.gamma
            self.params["bn_beta"] = self.bn.beta

    # -- helpers -------------------------------------------------------------

    def _project(self, X, training: bool, update_stats: bool):
        T = X @ self.params["D"]
        if self.bn is None:
            return T, None
        self.bn.gamma = self.params["bn_gamma"]
        self.bn.beta = self.params["bn_beta"]
        Tn, bn_cache = self.bn.forward(T, training=training, update=update_stats)
        return Tn, bn_cache

    def _project_backward(self, dT, X, bn_cache, grads):
        if self.bn is not None:
            dT, dgamma, dbeta = self.bn.backward(dT, bn_cache)
            grads["bn_gamma"] = dgamma
            grads["bn_beta"] = dbeta
        grads["D"] = X.T @ dT
        return dT @ self.params["D"].T

    def _pkm_pre(self, T):
        half = self.spec.d_l // 2
        s = T[:, :half] @ self.params["C"].T
        s2 = T[:, half:] @ self.params["C2"].T
        N, r = s.shape
        return (s[:, :, None] + s2[:, None, :]).reshape(N, r * r)

    def _pkm_pre_backward(self, dS, T, grads):
        half = self.spec.d_l // 2
        r = self.params["C"].shape[0]
        dS3 = dS.reshape(dS.shape[0], r, r)
        ds = dS3.sum(axis=2)
        ds2 = dS3.sum(axis=1)
        grads["C"] = ds.T @ T[:, :half]
        grads["C2"] = ds2.T @ T[:, half:]
        return np.concatenate([ds @ self.params["C"], ds2 @ self.params["C2"]], axis=1)

    def _cell_weights(self, N, cells, weights=None):
        W = np.zeros((N, self.geometry.d_m))
        rows = np.arange(N)[:, None]
        W[rows, cells] = 1.0 if weights is None else weights
        return W

    def _block_weights(self, N, blocks, weights=None):
        g = self.geometry
        Wb = np.zeros((N, g.B))
        rows = np.arange(N)[:, None]
        Wb[rows, blocks] = 1.0 if weights is None else weights
        return np.repeat(Wb, g.g, axis=1)

    # -- forward ---------------------------------------------------------------

    def forward(self, X, tokens=None, *, training: bool = True, frozen: Selection | None = None,
                update_stats: bool | None = None, rng_stream: RngStream | None = None):
        X = np.asarray(X, dtype=np.float64)
        N = X.shape[0]
        g = self.geometry
        p = self.params
        kind = self.kind
        if update_stats is None:
            update_stats = training and frozen is None
        cache = LayerCache(X=X, selection=frozen or Selection(), W=None)
        sel = cache.selection

        if kind in ("lorkm", "pkm"):
            T, bn_cache = self._project(X, training, update_stats)
            S = T @ p["Kt"].T if kind == "lorkm" else self._pkm_pre(T)
            cdf_s = normal_cdf(S)
            Mp = S * cdf_s
            if frozen is None:
                sel.cells = topk_rows(Mp, g.k)
            W = self._cell_weights(N, sel.cells)
            M = W * Mp
            cache.W, cache.M = W, M
            cache.extra.update(T=T, S=S, cdf_s=cdf_s, bn_cache=bn_cache)
            return M @ p["V"], cache

        H = X @ p["K"].T
        A = None
        if kind in FULL_ACTIVATION_KINDS:
            cdf = normal_cdf(H)
            A = H * cdf
            cache.extra["cdf"] = cdf

        if kind == "dense":
            W = None
        elif kind == "vanillam":
            if frozen is None:
                scores = Aggregator(self.spec.aggregator).reduce(A.reshape(N, g.B, g.g), axis=2)
                sel.blocks = topk_rows(scores, g.b)
            W = self._block_weights(N, sel.blocks)
        elif kind == "avgk":
            if frozen is None:
                means = p["K"].reshape(g.B, g.g, g.d).mean(axis=1)
                sel.blocks = topk_rows(X @ means.T, g.b)
            W = self._block_weights(N, sel.blocks)
        elif kind == "randhash":
            if frozen is None:
                if tokens is None:
                    raise ValueError("RandHash routing needs token ids")
                sel.blocks = self.hash_table.table[np.asarray(tokens).reshape(-1)]
            W = self._block_weights(N, sel.blocks)
        elif kind == "switch":
            logits = X @ p["theta"].T
            P = softmax(logits, axis=1)
            if frozen is None:
                sel.blocks = topk_rows(P, 1)
            chosen = sel.blocks[:, 0]
            weight = P[np.arange(N), chosen]
            W = self._block_weights(N, sel.blocks, weight[:, None])
            f = np.bincount(chosen, minlength=g.B) / N
            cache.aux_loss = switch_aux_loss(P, f)
            cache.extra.update(P=P, f=f, chosen=chosen)
        elif kind == "naive_ann":
            if frozen is None:
                stream = rng_stream or RngStream(self.seed, "naive-ann")
                cells = np.empty((N, g.k), dtype=np.int64)
                for n in range(N):
                    cells[n] = select_naive_ann(A[n], g.k, self.spec.sabotage_pct, stream.generator(n)).indices
                sel.cells = cells
            W = self._cell_weights(N, sel.cells)
        elif kind == "controller":
            if self.spec.controller == "lowrank":
                Tc, bn_cache = self._project(X, training, update_stats)
                G = Tc @ p["Kt"].T
                cache.extra.update(T=Tc, bn_cache=bn_cache)
            else:
                G = H
            if frozen is None:
                sel.cells = np.argmax(G.reshape(N, g.B, g.g), axis=2) + np.arange(g.B)[None, :] * g.g
            if self.spec.controller == "lowrank":
                W = self._cell_weights(N, sel.cells, G[np.arange(N)[:, None], sel.cells])
            else:
                W = self._cell_weights(N, sel.cells)
        elif kind == "pkm_ffn":
            T, bn_cache = self._project(X, training, update_stats)
            S = self._pkm_pre(T)
            cdf_s = normal_cdf(S)
            Mp = S * cdf_s
            if frozen is None:
                sel.cells = topk_rows(Mp, g.k)
            W = self._cell_weights(N, sel.cells, Mp[np.arange(N)[:, None], sel.cells])
            cache.extra.update(T=T, S=S, cdf_s=cdf_s, bn_cache=bn_cache)
        else:  # pragma: no cover
            raise AssertionError(kind)

        if A is None:
            # routing did not need the activations: evaluate GeLU on selected cells only
            active = self._active(N, sel)
            h = H[active]
            cdf = normal_cdf(h)
            A = np.zeros_like(H)
            A[active] = h * cdf
            cache.extra.update(active=active, cdf=cdf)
        M = A if W is None else W * A
        cache.H, cache.A, cache.W, cache.M = H, A, W, M
        return M @ p["V"], cache

    def _active(self, N, sel: Selection) -> np.ndarray:
        if sel.cells is not None:
            active = np.zeros((N, self.geometry.d_m), dtype=bool)
            active[np.arange(N)[:, None], sel.cells] = True
            return active
        blocks = np.zeros((N, self.geometry.B), dtype=bool)
        blocks[np.arange(N)[:, None], sel.blocks] = True
        return np.repeat(blocks, self.geometry.g, axis=1)

    # -- backward --------------------------------------------------------------

    def backward(self, dY, cache: LayerCache | None):
        if cache is None:
            raise ValueError("backward called without a forward trace")
        p = self.params
        X = cache.X
        N = X.shape[0]
        g = self.geometry
        kind = self.kind
        grads: dict[str, np.ndarray] = {}
        dM = dY @ p["V"].T
        grads["V"] = cache.M.T @ dY

        if kind in ("lorkm", "pkm"):
            T, S = cache.extra["T"], cache.extra["S"]
            dS = dM * cache.W * gelu_grad(S, cache.extra["cdf_s"])
            if kind == "lorkm":
                grads["Kt"] = dS.T @ T
                dT = dS @ p["Kt"]
            else:
                dT = self._pkm_pre_backward(dS, T, grads)
            dX = self._project_backward(dT, X, cache.extra["bn_cache"], grads)
            return dX, grads

        W, A, H = cache.W, cache.A, cache.H
        dA = dM if W is None else dM * W
        active = cache.extra.get("active")
        if active is None:
            dH = dA * gelu_grad(H, cache.extra["cdf"])
        else:
            dH = np.zeros_like(H)
            dH[active] = dA[active] * gelu_grad(H[active], cache.extra["cdf"])
        grads["K"] = dH.T @ X
        dX = dH @ p["K"]

        if kind == "switch":
            P, f, chosen = cache.extra["P"], cache.extra["f"], cache.extra["chosen"]
            dcell = (dM * A).reshape(N, g.B, g.g).sum(axis=2)
            dP = np.zeros_like(P)
            rows = np.arange(N)
            dP[rows, chosen] = dcell[rows, chosen]
            dP += self.spec.aux_weight * switch_aux_loss_grad(P, f)
            dlogits = P * (dP - (dP * P).sum(axis=1, keepdims=True))
            grads["theta"] = dlogits.T @ X
            dX = dX + dlogits @ p["theta"]
        elif kind == "pkm_ffn":
            T, S = cache.extra["T"], cache.extra["S"]
            # index by the selection, not W != 0: a selected coefficient may be exactly 0
            dMp = np.zeros_like(S)
            rows = np.arange(N)[:, None]
            dMp[rows, cache.selection.cells] = (dM * A)[rows, cache.selection.cells]
            dS = dMp * gelu_grad(S, cache.extra["cdf_s"])
            dT = self._pkm_pre_backward(dS, T, grads)
            dX = dX + self._project_backward(dT, X, cache.extra["bn_cache"], grads)
        elif kind == "controller" and self.spec.controller == "lowrank":
            T = cache.extra["T"]
            dG = np.zeros((N, g.d_m))
            rows = np.arange(N)[:, None]
            dG[rows, cache.selection.cells] = (dM * A)[rows, cache.selection.cells]
            grads["Kt"] = dG.T @ T
            dT = dG @ p["Kt"]
            dX = dX + self._project_backward(dT, X, cache.extra["bn_cache"], grads)
        return dX, grads

    def expert_param_names(self) -> tuple[str, ...]:
        return EXPERT_PARAMS if self.kind == "switch" else ()


def switch_aux_loss(router_probs, dispatch) -> float:
    """Load-balancing loss ``B * sum_i f_i * P_i``.

    ``dispatch`` is either a (tokens, B) one-hot matrix or the per-block
    dispatch fractions ``f`` directly.
    """
    P = np.asarray(router_probs, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("switch_aux_loss needs a non-empty (tokens, B) probability matrix")
    d = np.asarray(dispatch, dtype=np.float64)
    f = d.mean(axis=0) if d.ndim == 2 else d
    B = P.shape[1]
    return float(B * np.sum(f * P.mean(axis=0)))


def switch_aux_loss_grad(P: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Gradient of :func:`switch_aux_loss` w.r.t. the router probabilities (f held fixed)."""
    N, B = P.shape
    return np.broadcast_to(B * f / N, P.shape).copy()


def scale_expert_grads(grads: dict[str, np.ndarray], B: int,
                       expert_names=EXPERT_PARAMS) -> dict[str, np.ndarray]:
    """Divide expert (memory block) gradients by sqrt(B); gate gradients are untouched."""
    s = math.sqrt(B)
    return {name: (g / s if name in expert_names else g) for name, g in grads.items()}
