"""Causal LM training loop, losses and gradient checks for the S-FFN variants."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import MemoryLayer, SelectorSpec, scale_expert_grads, switch_aux_loss
from .memory import MemoryGeometry
from .model import ModelConfig, TinyLM
from .optim import Adam, AdamConfig, polynomial_decay_lr
from .tensor import RngStream, finite_diff_grad

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "train_loss", "val_ppl", "aux_loss")

__all__ = [
    "TrainConfig",
    "LossReport",
    "TrainResult",
    "TrainingDiverged",
    "load_corpus",
    "train_lm",
    "evaluate",
    "grad_check_suite",
    "switch_aux_loss",
    "scale_expert_grads",
]


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    eval_interval: int = 200
    eval_windows: int = 32
    val_fraction: float = 0.1
    seed: int = 0
    optim: AdamConfig = field(default_factory=AdamConfig)


@dataclass
class LossReport:
    clm_loss: float
    aux_loss: float
    aux_weight: float
    tokens: int

    @property
    def total(self) -> float:
        return self.clm_loss + self.aux_weight * self.aux_loss


@dataclass
class TrainResult:
    metrics: list[dict]
    step_losses: np.ndarray
    model: TinyLM
    trace: list[tuple] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, metrics: list[dict]):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step
        self.metrics = metrics


def load_corpus(path) -> np.ndarray:
    """Byte-level tokens of a text file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64)


def split_corpus(tokens: np.ndarray, seq_len: int, val_fraction: float):
    n_val = int(len(tokens) * val_fraction)
    train, val = tokens[: len(tokens) - n_val], tokens[len(tokens) - n_val :]
    if len(train) < seq_len + 1 or len(val) < seq_len + 1:
        raise ValueError(
            f"corpus too small: need at least {seq_len + 1} tokens in each split, "
            f"got train={len(train)} val={len(val)}"
        )
    return train, val


def sample_batch(tokens: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    starts = rng.integers(0, len(tokens) - seq_len, size=batch_size)
    return np.stack([tokens[s : s + seq_len + 1] for s in starts])


def eval_windows(tokens: np.ndarray, seq_len: int, n_windows: int) -> np.ndarray:
    starts = np.linspace(0, len(tokens) - seq_len - 1, n_windows).astype(np.int64)
    return np.stack([tokens[s : s + seq_len + 1] for s in starts])


def evaluate(model: TinyLM, windows: np.ndarray, batch_size: int = 8, trace: list | None = None) -> float:
    """Perplexity over fixed windows; optionally appends routing events to ``trace``."""
    total, count = 0.0, 0
    S = model.config.seq_len
    for b0 in range(0, len(windows), batch_size):
        batch = windows[b0 : b0 + batch_size]
        logits, cache = model.forward(batch[:, :-1], training=False)
        ce, _ = model.loss(logits, batch[:, 1:])
        n = batch.shape[0] * S
        total += ce * n
        count += n
        if trace is not None:
            _record(model, cache, batch[:, :-1], b0, trace)
    return float(math.exp(total / count))


def _record(model: TinyLM, cache, tokens: np.ndarray, seq_offset: int, trace: list) -> None:
    Bt, S = tokens.shape
    for i, sel in model.selections(cache).items():
        ids = sel.block_ids(model.ffn[i].geometry)
        if ids is None:
            continue
        ids = ids.reshape(Bt, S, -1)
        for b in range(Bt):
            for pos in range(S):
                trace.append((i, seq_offset + b, pos, int(tokens[b, pos]), tuple(int(v) for v in ids[b, pos])))


def train_step(model: TinyLM, opt: Adam, batch: np.ndarray, lr: float, step: int) -> LossReport:
    c = model.config
    logits, cache = model.forward(batch[:, :-1], training=True, step=step)
    ce, dlogits = model.loss(logits, batch[:, 1:])
    grads = model.backward(dlogits, cache)
    if c.selector.kind == "switch":
        for i in c.sffn_layer_indices:
            layer = model.ffn[i]
            prefix = f"l{i}.ffn."
            local = {k[len(prefix):]: v for k, v in grads.items() if k.startswith(prefix)}
            scaled = scale_expert_grads(local, layer.geometry.B, layer.expert_param_names())
            grads.update({prefix + k: v for k, v in scaled.items()})
    aux = float(sum(cache["aux"]))
    report = LossReport(ce, aux, c.selector.aux_weight if c.selector.kind == "switch" else 0.0,
                        batch.shape[0] * c.seq_len)
    if math.isfinite(report.total):
        opt.step(model.params, grads, lr)
    return report


def train_lm(config: ModelConfig, corpus: np.ndarray, steps: int, seed: int,
             train_cfg: TrainConfig | None = None, record_trace: bool = False) -> TrainResult:
    """Train a :class:`TinyLM` with next-token cross entropy.

    Validation perplexity is measured at step 0, every ``eval_interval``
    steps and after the last step.  Everything random draws from
    ``RngStream(seed, ...)``, so identical inputs give identical curves.
    """
    tc = train_cfg or TrainConfig()
    train, val = split_corpus(np.asarray(corpus), config.seq_len, tc.val_fraction)
    windows = eval_windows(val, config.seq_len, tc.eval_windows)
    model = TinyLM(config, seed)
    opt = Adam(tc.optim)
    data = RngStream(seed, "data")
    metrics: list[dict] = []
    step_losses = np.zeros(steps)
    pending_loss: list[float] = []
    pending_aux: list[float] = []

    def emit(step, train_loss, aux):
        row = {"step": step, "train_loss": train_loss, "val_ppl": evaluate(model, windows), "aux_loss": aux}
        metrics.append(row)
        log.info("step %d train_loss %.4f val_ppl %.3f", step, train_loss, row["val_ppl"])

    first = sample_batch(train, config.seq_len, tc.batch_size, data.generator(0))
    logits, _ = model.forward(first[:, :-1], training=False)
    emit(0, model.loss(logits, first[:, 1:])[0], 0.0)

    for step in range(steps):
        batch = sample_batch(train, config.seq_len, tc.batch_size, data.generator(step))
        lr = polynomial_decay_lr(step, steps, tc.optim)
        report = train_step(model, opt, batch, lr, step)
        if not math.isfinite(report.total):
            raise TrainingDiverged(step, metrics)
        step_losses[step] = report.clm_loss
        pending_loss.append(report.clm_loss)
        pending_aux.append(report.aux_loss)
        done = step + 1
        if done % tc.eval_interval == 0 or done == steps:
            emit(done, float(np.mean(pending_loss)), float(np.mean(pending_aux)))
            pending_loss.clear()
            pending_aux.clear()

    trace: list[tuple] = []
    if record_trace:
        evaluate(model, windows, trace=trace)
    return TrainResult(metrics=metrics, step_losses=step_losses, model=model, trace=trace)


# -- gradient checks ---------------------------------------------------------

GRADCHECK_VARIANTS: dict[str, tuple[MemoryGeometry, dict]] = {
    "dense": (MemoryGeometry(6, 24, 1, 24), {"kind": "dense"}),
    "vanillam-avg": (MemoryGeometry(6, 24, 4, 8), {"kind": "vanillam", "aggregator": "avg"}),
    "vanillam-avgabs": (MemoryGeometry(6, 24, 4, 8), {"kind": "vanillam", "aggregator": "avgabs"}),
    "vanillam-max": (MemoryGeometry(6, 24, 4, 8), {"kind": "vanillam", "aggregator": "max"}),
    "vanillam-min": (MemoryGeometry(6, 24, 4, 8), {"kind": "vanillam", "aggregator": "min"}),
    "randhash": (MemoryGeometry(6, 24, 4, 8), {"kind": "randhash"}),
    "switch": (MemoryGeometry(6, 24, 6, 6), {"kind": "switch"}),
    "avgk": (MemoryGeometry(6, 24, 4, 8), {"kind": "avgk"}),
    "pkm": (MemoryGeometry(6, 16, 1, 5), {"kind": "pkm", "d_l": 4}),
    "lorkm": (MemoryGeometry(6, 24, 1, 6), {"kind": "lorkm", "d_l": 4}),
    "pkm_ffn": (MemoryGeometry(6, 16, 1, 5), {"kind": "pkm_ffn", "d_l": 4}),
    "controller": (MemoryGeometry(6, 32, 4, 8), {"kind": "controller"}),
    "controller-lowrank": (MemoryGeometry(6, 32, 4, 8), {"kind": "controller", "controller": "lowrank", "d_l": 4}),
}


def max_rel_error(numeric: np.ndarray, analytic: np.ndarray, floor: float = 1e-8) -> float:
    """Largest relative error; entries whose magnitude is below ``floor`` are compared absolutely."""
    big = np.maximum(np.abs(numeric), np.abs(analytic))
    diff = np.abs(numeric - analytic)
    err = np.where(big < floor, diff, diff / np.where(big < floor, 1.0, big))
    return float(err.max()) if err.size else 0.0


def check_layer_gradients(layer: MemoryLayer, X, tokens, upstream, eps: float = 1e-5) -> dict[str, float]:
    """Compare the layer's backward pass with central differences.

    The selection from the first forward pass is frozen for every perturbed
    evaluation.  The loss is ``sum(Y * upstream)`` plus the weighted
    auxiliary loss when the layer has one.
    """
    Y, cache = layer.forward(X, tokens, update_stats=False)
    frozen = cache.selection
    dX, grads = layer.backward(upstream, cache)
    aux_weight = layer.spec.aux_weight if layer.kind == "switch" else 0.0

    # measure the loss relative to the unperturbed output so that the central
    # difference is not swamped by rounding of a large constant
    Y0, c0 = layer.forward(X, tokens, frozen=frozen, update_stats=False)

    def loss() -> float:
        Y, c = layer.forward(X, tokens, frozen=frozen, update_stats=False)
        return math.fsum(((Y - Y0) * upstream).ravel()) + aux_weight * (c.aux_loss - c0.aux_loss)

    report = {}
    targets = list(layer.params.items()) + [("x", X)]
    for name, arr in targets:
        orig = arr.copy()

        def f(a, arr=arr):
            arr[...] = a
            return loss()

        numeric = finite_diff_grad(f, orig, eps)
        arr[...] = orig
        report[name] = max_rel_error(numeric, dX if name == "x" else grads[name])
    return report


def grad_check_suite(variants=None, seed: int = 0, tokens: int = 6, tol: float = 1e-4) -> dict:
    """Run :func:`check_layer_gradients` for each named variant.

    Returns ``{variant: {"max_rel_error": ..., "per_param": {...}, "passed": bool}}``.
    """
    names = list(GRADCHECK_VARIANTS) if variants is None else list(variants)
    out = {}
    for name in names:
        geometry, spec_kw = GRADCHECK_VARIANTS[name]
        rng = RngStream(seed, f"gradcheck/{name}").generator()
        layer = MemoryLayer(geometry, SelectorSpec(**spec_kw), rng, vocab_size=11, seed=seed)
        for arr in layer.params.values():
            arr[...] = rng.normal(0.0, 0.5, arr.shape)
        X = rng.normal(size=(tokens, geometry.d))
        tok = rng.integers(0, 11, size=tokens)
        upstream = rng.normal(size=(tokens, geometry.d))
        per_param = check_layer_gradients(layer, X, tok, upstream)
        worst = max(per_param.values())
        out[name] = {"max_rel_error": worst, "per_param": per_param, "passed": worst <= tol}
    return out
