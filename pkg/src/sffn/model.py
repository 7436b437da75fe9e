"""A small pre-LayerNorm causal transformer with manual backpropagation.

Single-head attention, tied input/output embeddings, learned positions, no
biases in the attention projections and no dropout.  The FFN of every layer
is a :class:`~sffn.layers.MemoryLayer`; layers listed in
``ModelConfig.sffn_layer_indices`` use the configured sparse selector and the
rest are dense ``4 d`` FFNs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import MemoryLayer, Selection, SelectorSpec
from .memory import MemoryGeometry
from .tensor import RngStream, softmax


def default_sffn_layers(layers: int, every: int = 6) -> list[int]:
    """Replace the FFN of every ``every``-th layer (last of each group, 0-indexed).

    Models shallower than ``every`` get a single sparse layer on top.
    """
    picked = [i for i in range(layers) if (i + 1) % every == 0]
    return picked or [layers - 1]


@dataclass
class ModelConfig:
    layers: int = 4
    d: int = 64
    heads: int = 1
    seq_len: int = 128
    vocab_size: int = 256
    geometry: MemoryGeometry = field(default_factory=lambda: MemoryGeometry(64, 1024, 1, 256))
    selector: SelectorSpec = field(default_factory=SelectorSpec)
    sffn_layer_indices: list[int] | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if self.heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.sffn_layer_indices is None:
            self.sffn_layer_indices = default_sffn_layers(self.layers)
        bad = [i for i in self.sffn_layer_indices if not 0 <= i < self.layers]
        if bad:
            raise ValueError(f"sffn_layer_indices {bad} outside [0, {self.layers})")
        if self.geometry.d != self.d:
            raise ValueError(f"memory width {self.geometry.d} != model width {self.d}")


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv)


def layer_norm_backward(dout, gamma, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dgamma = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


class TinyLM:
    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        c = config
        rng = RngStream(seed, "init").generator()
        std = c.init_std
        proj_std = std / math.sqrt(2 * c.layers)
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, std, (c.vocab_size, c.d)),
            "pos_emb": rng.normal(0, std, (c.seq_len, c.d)),
            "lnf_g": np.ones(c.d),
            "lnf_b": np.zeros(c.d),
        }
        self.ffn: list[MemoryLayer] = []
        dense_geo = MemoryGeometry(c.d, 4 * c.d, 1, 4 * c.d)
        for i in range(c.layers):
            p[f"l{i}.ln1_g"] = np.ones(c.d)
            p[f"l{i}.ln1_b"] = np.zeros(c.d)
            p[f"l{i}.ln2_g"] = np.ones(c.d)
            p[f"l{i}.ln2_b"] = np.zeros(c.d)
            for name in ("wq", "wk", "wv"):
                p[f"l{i}.{name}"] = rng.normal(0, std, (c.d, c.d))
            p[f"l{i}.wo"] = rng.normal(0, proj_std, (c.d, c.d))
            if i in c.sffn_layer_indices:
                layer = MemoryLayer(c.geometry, c.selector, rng, vocab_size=c.vocab_size,
                                    seed=seed + 1000 * i, init_std=std)
            else:
                layer = MemoryLayer(dense_geo, SelectorSpec("dense"), rng, init_std=std)
            for name, arr in layer.params.items():
                p[f"l{i}.ffn.{name}"] = arr
            self.ffn.append(layer)
        self.params = p

    def sync(self):
        """Point every FFN layer at the arrays currently held in ``params``."""
        for i, layer in enumerate(self.ffn):
            for name in layer.params:
                layer.params[name] = self.params[f"l{i}.ffn.{name}"]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus BatchNorm running statistics, for checkpoints."""
        state = {k: v.copy() for k, v in self.params.items()}
        for i, layer in enumerate(self.ffn):
            if layer.bn is not None:
                state[f"l{i}.ffn.bn_running_mean"] = layer.bn.running_mean.copy()
                state[f"l{i}.ffn.bn_running_var"] = layer.bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, arr in self.params.items():
            if state[name].shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]
        for i, layer in enumerate(self.ffn):
            if layer.bn is not None:
                layer.bn.running_mean = np.array(state[f"l{i}.ffn.bn_running_mean"])
                layer.bn.running_var = np.array(state[f"l{i}.ffn.bn_running_var"])
        self.sync()

    def sparse_layers(self) -> list[int]:
        return [i for i in self.config.sffn_layer_indices]

    # -- forward ------------------------------------------------------------

    def forward(self, tokens, targets=None, *, training=True, frozen=None, step=0):
        """Run the model; returns (logits, cache).

        ``frozen`` maps layer index to a :class:`Selection` to reuse instead
        of routing afresh (used for gradient checks).
        """
        self.sync()
        c = self.config
        p = self.params
        tokens = np.asarray(tokens)
        Bt, S = tokens.shape
        x = p["tok_emb"][tokens] + p["pos_emb"][:S]
        mask = np.triu(np.ones((S, S), dtype=bool), k=1)
        layer_caches = []
        aux = []
        for i in range(c.layers):
            lc = {"x_in": x}
            h, lc["ln1"] = layer_norm_forward(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            q = h @ p[f"l{i}.wq"]
            k = h @ p[f"l{i}.wk"]
            v = h @ p[f"l{i}.wv"]
            scores = q @ k.transpose(0, 2, 1) / math.sqrt(c.d)
            scores = np.where(mask, -np.inf, scores)
            att = softmax(scores, axis=-1)
            o = att @ v
            x = x + o @ p[f"l{i}.wo"]
            lc.update(h=h, q=q, k=k, v=v, att=att, o=o)
            h2, lc["ln2"] = layer_norm_forward(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            lc["h2"] = h2
            layer = self.ffn[i]
            y, fc = layer.forward(
                h2.reshape(Bt * S, c.d), tokens.reshape(-1), training=training,
                frozen=None if frozen is None else frozen.get(i),
                rng_stream=RngStream(self.seed, f"naive-ann/{i}", step),
            )
            lc["ffn"] = fc
            aux.append(fc.aux_loss)
            x = x + y.reshape(Bt, S, c.d)
            layer_caches.append(lc)
        hf, lnf_cache = layer_norm_forward(x, p["lnf_g"], p["lnf_b"])
        logits = hf @ p["tok_emb"].T
        cache = {"tokens": tokens, "layers": layer_caches, "hf": hf, "lnf": lnf_cache,
                 "aux": aux, "logits": logits}
        return logits, cache

    def selections(self, cache) -> dict[int, Selection]:
        return {i: cache["layers"][i]["ffn"].selection for i in self.config.sffn_layer_indices}

    # -- loss + backward ------------------------------------------------------

    def loss(self, logits, targets):
        """Mean next-token cross entropy (nats) and its gradient w.r.t. logits."""
        Bt, S, V = logits.shape
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        n = Bt * S
        flat = logp.reshape(n, V)
        t = np.asarray(targets).reshape(n)
        ce = -flat[np.arange(n), t].mean()
        dlogits = np.exp(flat)
        dlogits[np.arange(n), t] -= 1.0
        return float(ce), (dlogits / n).reshape(Bt, S, V)

    def backward(self, dlogits, cache):
        c = self.config
        p = self.params
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        Bt, S, _ = dlogits.shape
        hf = cache["hf"]
        grads["tok_emb"] += dlogits.reshape(-1, c.vocab_size).T @ hf.reshape(-1, c.d)
        dhf = dlogits @ p["tok_emb"]
        dx, grads["lnf_g"], grads["lnf_b"] = layer_norm_backward(dhf, p["lnf_g"], cache["lnf"])
        for i in reversed(range(c.layers)):
            lc = cache["layers"][i]
            dy = dx.reshape(Bt * S, c.d)
            dh2, fgrads = self.ffn[i].backward(dy, lc["ffn"])
            for name, gr in fgrads.items():
                grads[f"l{i}.ffn.{name}"] += gr
            dxi, grads[f"l{i}.ln2_g"], grads[f"l{i}.ln2_b"] = layer_norm_backward(
                dh2.reshape(Bt, S, c.d), p[f"l{i}.ln2_g"], lc["ln2"])
            dx = dx + dxi
            # attention
            grads[f"l{i}.wo"] += lc["o"].reshape(-1, c.d).T @ dx.reshape(-1, c.d)
            do = dx @ p[f"l{i}.wo"].T
            att = lc["att"]
            datt = do @ lc["v"].transpose(0, 2, 1)
            dv = att.transpose(0, 2, 1) @ do
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
            dscores /= math.sqrt(c.d)
            dq = dscores @ lc["k"]
            dk = dscores.transpose(0, 2, 1) @ lc["q"]
            h = lc["h"].reshape(-1, c.d)
            dh = np.zeros_like(lc["h"])
            for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
                grads[f"l{i}.{name}"] += h.T @ dproj.reshape(-1, c.d)
                dh += dproj @ p[f"l{i}.{name}"].T
            dxi, grads[f"l{i}.ln1_g"], grads[f"l{i}.ln1_b"] = layer_norm_backward(
                dh, p[f"l{i}.ln1_g"], lc["ln1"])
            dx = dx + dxi
        np.add.at(grads["tok_emb"], cache["tokens"], dx)
        grads["pos_emb"][:S] += dx.sum(axis=0)
        return grads
