import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sffn.layers import KINDS, MemoryLayer, SelectorSpec, scale_expert_grads, switch_aux_loss, switch_aux_loss_grad
from sffn.memory import BlockSelection, MemoryGeometry, dense_ffn, sparse_apply
from sffn.model import ModelConfig, TinyLM, default_sffn_layers
from sffn.selectors import (
    Aggregator,
    ExpertEmbeddings,
    LowRankKeys,
    ProductKeys,
    lorkm_scores,
    pkm_scores,
    select_avgk,
    select_controller,
    select_pkm_ffn,
    select_randhash,
    select_switch,
    select_vanillam,
)
from sffn.tensor import topk_indices
from sffn.training import GRADCHECK_VARIANTS, grad_check_suite, max_rel_error

D = 6


def make_layer(geometry, seed=0, **spec):
    rng = np.random.default_rng(seed)
    layer = MemoryLayer(geometry, SelectorSpec(**spec), rng, vocab_size=13, seed=seed)
    for arr in layer.params.values():
        arr[...] = rng.normal(0.0, 0.7, arr.shape)
    X = rng.normal(size=(9, geometry.d))
    tokens = rng.integers(0, 13, size=9)
    return layer, X, tokens


def per_token_oracle(layer, X, tokens):
    """Route and apply each token separately with the single-token selector functions."""
    p, geo, kind = layer.params, layer.geometry, layer.kind
    out = []
    for x, t in zip(X, tokens):
        if kind == "dense":
            out.append(dense_ffn(x, p["K"], p["V"]))
        elif kind in ("vanillam", "naive_ann"):
            agg = layer.spec.aggregator
            out.append(sparse_apply(x, p["K"], p["V"], select_vanillam(x, p["K"], geo, Aggregator(agg)), geo))
        elif kind == "avgk":
            out.append(sparse_apply(x, p["K"], p["V"], select_avgk(x, p["K"], geo), geo))
        elif kind == "randhash":
            out.append(sparse_apply(x, p["K"], p["V"], select_randhash(int(t), layer.hash_table), geo))
        elif kind == "switch":
            out.append(sparse_apply(x, p["K"], p["V"], select_switch(x, ExpertEmbeddings(p["theta"])), geo))
        elif kind == "pkm_ffn":
            pk = ProductKeys(p["D"], p["C"], p["C2"], batch_norm=False)
            out.append(sparse_apply(x, p["K"], p["V"], select_pkm_ffn(x, pk, geo.k), geo))
        elif kind in ("pkm", "lorkm"):
            if kind == "pkm":
                m = pkm_scores(x, ProductKeys(p["D"], p["C"], p["C2"], batch_norm=False))
            else:
                m = lorkm_scores(x, LowRankKeys(p["D"], p["Kt"]))
            idx = topk_indices(m, geo.k)
            out.append(m[idx] @ p["V"][idx])
        elif kind == "controller":
            ctrl = LowRankKeys(p["D"], p["Kt"]) if layer.spec.controller == "lowrank" else None
            sel = select_controller(x, p["K"], geo, ctrl)
            out.append(sparse_apply(x, p["K"], p["V"], sel, geo.cells()))
        else:
            raise AssertionError(kind)
    return np.array(out)


ORACLE_CASES = {
    "dense": (MemoryGeometry(D, 24, 1, 24), {}),
    "vanillam-avg": (MemoryGeometry(D, 24, 4, 8), {"kind": "vanillam", "aggregator": "avg"}),
    "vanillam-min": (MemoryGeometry(D, 24, 4, 8), {"kind": "vanillam", "aggregator": "min"}),
    "avgk": (MemoryGeometry(D, 24, 4, 8), {"kind": "avgk"}),
    "randhash": (MemoryGeometry(D, 24, 4, 8), {"kind": "randhash"}),
    "switch": (MemoryGeometry(D, 24, 6, 6), {"kind": "switch"}),
    "pkm_ffn": (MemoryGeometry(D, 16, 1, 5), {"kind": "pkm_ffn", "d_l": 4, "batch_norm": False}),
    "pkm": (MemoryGeometry(D, 16, 1, 5), {"kind": "pkm", "d_l": 4, "batch_norm": False}),
    "lorkm": (MemoryGeometry(D, 24, 1, 6), {"kind": "lorkm", "d_l": 4}),
    "controller": (MemoryGeometry(D, 32, 4, 8), {"kind": "controller"}),
    "controller-lowrank": (MemoryGeometry(D, 32, 4, 8), {"kind": "controller", "controller": "lowrank", "d_l": 4}),
    "naive_ann-0": (MemoryGeometry(D, 24, 1, 7), {"kind": "naive_ann", "sabotage_pct": 0.0}),
}


@pytest.mark.parametrize("case", sorted(ORACLE_CASES))
def test_batched_layer_matches_per_token_selectors(case):
    geometry, spec = ORACLE_CASES[case]
    spec = {"kind": "dense", **spec}
    layer, X, tokens = make_layer(geometry, seed=3, **spec)
    Y, _ = layer.forward(X, tokens, training=False)
    assert np.allclose(Y, per_token_oracle(layer, X, tokens), rtol=1e-10, atol=1e-12)


def test_every_kind_has_an_oracle_or_gradcheck():
    covered = {spec.get("kind", "dense") for _, spec in ORACLE_CASES.values()}
    assert covered == set(KINDS)


def test_frozen_selection_is_reused():
    layer, X, tokens = make_layer(MemoryGeometry(D, 24, 4, 8), kind="avgk")
    _, cache = layer.forward(X, tokens)
    frozen = cache.selection
    _, again = layer.forward(X * -1.0, tokens, frozen=frozen)
    assert again.selection is frozen


@pytest.mark.parametrize("kind,geometry", [
    ("dense", MemoryGeometry(D, 24, 1, 8)),
    ("pkm", MemoryGeometry(D, 24, 1, 8)),
    ("lorkm", MemoryGeometry(D, 24, 2, 8)),
    ("controller", MemoryGeometry(D, 24, 4, 8)),
])
def test_inconsistent_geometry_rejected(kind, geometry):
    with pytest.raises(ValueError):
        MemoryLayer(geometry, SelectorSpec(kind), np.random.default_rng(0))


def test_selector_spec_validation():
    with pytest.raises(ValueError):
        SelectorSpec("nope")
    with pytest.raises(ValueError):
        SelectorSpec("vanillam", aggregator="median")
    assert SelectorSpec("pkm").batch_norm is True
    assert SelectorSpec("lorkm").batch_norm is False


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_grad_check_suite_all_variants(seed):
    report = grad_check_suite(seed=seed)
    assert set(report) == set(GRADCHECK_VARIANTS)
    bad = {k: v["max_rel_error"] for k, v in report.items() if not v["passed"]}
    assert not bad


def test_max_rel_error_floor():
    assert max_rel_error(np.array([1e-12]), np.array([3e-12])) == pytest.approx(2e-12)
    assert max_rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


@pytest.mark.parametrize("kind,geometry,extra", [
    ("dense", MemoryGeometry(8, 32, 1, 32), {}),
    ("switch", MemoryGeometry(8, 32, 8, 8), {}),
    ("pkm_ffn", MemoryGeometry(8, 16, 1, 5), {"d_l": 4}),
    ("avgk", MemoryGeometry(8, 32, 4, 8), {}),
])
def test_whole_model_gradients(kind, geometry, extra):
    cfg = ModelConfig(layers=2, d=8, seq_len=5, vocab_size=11, geometry=geometry,
                      selector=SelectorSpec(kind, **extra), sffn_layer_indices=[1], init_std=0.3)
    model = TinyLM(cfg, seed=4)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 11, size=(2, 6))
    logits, cache = model.forward(tokens[:, :-1], training=False)
    frozen = model.selections(cache)
    weight = cfg.selector.aux_weight if kind == "switch" else 0.0
    ce, dlogits = model.loss(logits, tokens[:, 1:])
    grads = model.backward(dlogits, cache)

    def total():
        lg, c = model.forward(tokens[:, :-1], training=False, frozen=frozen)
        return model.loss(lg, tokens[:, 1:])[0] + weight * sum(c["aux"])

    worst = 0.0
    for name in sorted(model.params):
        arr = model.params[name]
        for flat in rng.choice(arr.size, size=min(arr.size, 3), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + 1e-5
            fp = total()
            arr[idx] = orig - 1e-5
            fm = total()
            arr[idx] = orig
            num = (fp - fm) / 2e-5
            worst = max(worst, max_rel_error(np.array([num]), np.array([grads[name][idx]]), floor=1e-7))
    assert worst < 1e-4


# -- Switch auxiliary loss -----------------------------------------------------


@pytest.mark.parametrize("B", [1, 2, 4, 16])
def test_aux_loss_balanced_and_collapsed(B):
    N = 4 * B
    P = np.full((N, B), 1.0 / B)
    onehot = np.eye(B)[np.arange(N) % B]
    assert switch_aux_loss(P, onehot) == pytest.approx(1.0, abs=1e-15)
    collapsed = np.zeros((N, B))
    collapsed[:, 0] = 1.0
    assert switch_aux_loss(collapsed, collapsed) == pytest.approx(float(B), abs=1e-12)


@given(st.integers(1, 8), st.data())
def test_aux_loss_at_least_one_when_dispatch_matches_probabilities(B, data):
    w = np.array(data.draw(st.lists(st.floats(0.01, 1.0), min_size=B, max_size=B)))
    f = w / w.sum()
    P = np.tile(f, (3, 1))
    assert switch_aux_loss(P, f) >= 1.0 - 1e-12
    assert switch_aux_loss(P, f) == pytest.approx(B * float(np.sum(f * f)))


def test_aux_loss_can_dip_below_one_under_argmax_dispatch():
    # three experts, two tokens: argmax dispatch f = (1/2, 1/2, 0) against
    # mean probabilities (0.17, 0.415, 0.415) gives 3 * 0.2925 < 1
    P = np.array([[0.34, 0.33, 0.33], [0.0, 0.5, 0.5]])
    onehot = np.eye(3)[[0, 1]]
    assert switch_aux_loss(P, onehot) == pytest.approx(0.8775)


def test_aux_loss_gradient():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(4), size=5)
    f = rng.dirichlet(np.ones(4))
    num = np.zeros_like(P)
    for i in range(5):
        for j in range(4):
            Q = P.copy()
            Q[i, j] += 1e-6
            R = P.copy()
            R[i, j] -= 1e-6
            num[i, j] = (switch_aux_loss(Q, f) - switch_aux_loss(R, f)) / 2e-6
    assert np.allclose(switch_aux_loss_grad(P, f), num, atol=1e-8)


def test_aux_loss_rejects_empty():
    with pytest.raises(ValueError):
        switch_aux_loss(np.zeros((0, 3)), np.zeros(3))


@pytest.mark.parametrize("B", [1, 2, 3, 16, 64])
def test_expert_gradient_scaling_is_exact(B):
    rng = np.random.default_rng(B)
    grads = {"K": rng.normal(size=(4, 3)), "V": rng.normal(size=(4, 3)), "theta": rng.normal(size=(B, 3))}
    scaled = scale_expert_grads(grads, B)
    s = math.sqrt(B)
    assert np.array_equal(scaled["K"], grads["K"] / s)
    assert np.array_equal(scaled["V"], grads["V"] / s)
    assert scaled["theta"] is grads["theta"]


def test_default_sffn_placement():
    assert default_sffn_layers(24) == [5, 11, 17, 23]
    assert default_sffn_layers(4) == [3]
    assert default_sffn_layers(12) == [5, 11]
