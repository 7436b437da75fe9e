"""Property suites run by ``sffn verify``; each check records tolerance and observed error."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import analysis
from .memory import BlockSelection, MemoryGeometry, dense_ffn, moe_as_memory, moe_standard, sparse_apply
from .selectors import (
    LowRankKeys,
    ProductKeys,
    build_randhash,
    lorkm_scores,
    pkm_pre_activations,
    score_avgk,
    select_naive_ann,
    select_vanillam,
)
from .memory import coefficients
from .tensor import RngStream, gelu, matmul, softmax
from .training import grad_check_suite

SUITES = ("equivalence", "gradcheck", "flops", "overlap", "all")


@dataclass
class Check:
    name: str
    observed: float
    tolerance: float
    passed: bool
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def _le(name, observed, tol, detail="") -> Check:
    return Check(name, float(observed), float(tol), bool(observed <= tol), detail)


# -- equivalence -----------------------------------------------------------------


def moe_memory_equivalence(n: int = 200, seed: int = 0) -> Check:
    worst = 0.0
    for i in range(n):
        rng = RngStream(seed, "verify/moe").generator(i)
        B, g, d = (int(v) for v in rng.integers(1, 9, size=3))
        experts = [(rng.normal(size=(g, d)), rng.normal(size=(g, d))) for _ in range(B)]
        gate = softmax(rng.normal(size=B))
        if rng.random() < 0.5:
            # sparse gate: zero all but the top experts
            keep = rng.integers(1, B + 1)
            gate[np.argsort(-gate)[keep:]] = 0.0
        x = rng.normal(size=d)
        worst = max(worst, rel_err(moe_as_memory(x, experts, gate), moe_standard(x, experts, gate)))
    return _le("moe_memory_equivalence", worst, 1e-10, f"{n} instances, B,g,d <= 8")


def avgk_linearity(n: int = 100, seed: int = 0) -> Check:
    worst = 0.0
    for i in range(n):
        rng = RngStream(seed, "verify/avgk").generator(i)
        d, g, B = (int(v) for v in rng.integers(1, 9, size=3))
        geo = MemoryGeometry(d, g * B, g, g)
        K = rng.normal(size=(g * B, d))
        x = rng.normal(size=d)
        fast = score_avgk(x, K, geo)
        oracle = np.array([math.fsum(math.fsum(K[j, c] * x[c] for c in range(d)) for j in range(blk * g, blk * g + g)) / g
                           for blk in range(B)])
        worst = max(worst, rel_err(fast, oracle))
    return _le("avgk_linearity", worst, 1e-12, f"{n} instances")


def factorized_scoring(n: int = 50, seed: int = 0) -> list[Check]:
    worst_pkm = worst_lr = 0.0
    for i in range(n):
        rng = RngStream(seed, "verify/factorized").generator(i)
        d = int(rng.integers(2, 9))
        r = int(rng.integers(1, 6))
        d_l = 2 * int(rng.integers(1, 5))
        pk = ProductKeys.init(d, r * r, d_l, rng, batch_norm=False)
        x = rng.normal(size=d)
        full = matmul(pk.materialize(), matmul(x, pk.D))
        worst_pkm = max(worst_pkm, rel_err(pkm_pre_activations(x, pk), full))
        lr = LowRankKeys(rng.normal(size=(d, d_l)), rng.normal(size=(r * r + 1, d_l)))
        worst_lr = max(worst_lr, rel_err(lorkm_scores(x, lr), gelu(matmul(lr.materialize(), x))))
    # index map: with r = 2, cell 3 is built from c_1 and c'_1
    rng = RngStream(seed, "verify/index").generator()
    pk = ProductKeys.init(4, 4, 4, rng, batch_norm=False)
    mapped = pk.key_index(3) == (1, 1)
    row = pk.materialize()[3]
    row_ok = np.array_equal(row, np.concatenate([pk.C[1], pk.C2[1]]))
    return [
        _le("pkm_factorized_vs_materialized", worst_pkm, 1e-10, f"{n} instances, batch norm off"),
        _le("lorkm_factorized_vs_materialized", worst_lr, 1e-10, f"{n} instances"),
        Check("pkm_index_map_i3", 0.0 if (mapped and row_ok) else 1.0, 0.0, bool(mapped and row_ok),
              f"key_index(3)={pk.key_index(3)}"),
    ]


def degeneracy(n: int = 50, seed: int = 0) -> list[Check]:
    mismatches_full = mismatches_ann = 0
    for i in range(n):
        rng = RngStream(seed, "verify/degeneracy").generator(i)
        d, g, B = (int(v) for v in rng.integers(1, 9, size=3))
        geo = MemoryGeometry(d, g * B, g, g * B)
        K, V = rng.normal(size=(g * B, d)), rng.normal(size=(g * B, d))
        x = rng.normal(size=d)
        full = sparse_apply(x, K, V, BlockSelection.hard(np.arange(B)), geo)
        mismatches_full += not np.array_equal(full, dense_ffn(x, K, V))

        k = int(rng.integers(1, g * B + 1))
        cells = MemoryGeometry(d, g * B, 1, k)
        ann = select_naive_ann(coefficients(x, K), k, 0.0, rng)
        van = select_vanillam(x, K, cells)
        mismatches_ann += not np.array_equal(sparse_apply(x, K, V, ann, cells), sparse_apply(x, K, V, van, cells))
    return [
        Check("full_selection_bit_identical", float(mismatches_full), 0.0, mismatches_full == 0, f"{n} instances"),
        Check("naive_ann_n0_bit_identical", float(mismatches_ann), 0.0, mismatches_ann == 0, f"{n} instances"),
    ]


def equivalence_suite(seed: int = 0) -> list[Check]:
    return [moe_memory_equivalence(seed=seed), avgk_linearity(seed=seed), *factorized_scoring(seed=seed),
            *degeneracy(seed=seed)]


# -- gradients -------------------------------------------------------------------


def gradcheck_suite(seed: int = 0, tol: float = 1e-4) -> list[Check]:
    return [Check(f"gradcheck_{name}", r["max_rel_error"], tol, r["passed"], "central differences, 1e-8 abs floor")
            for name, r in grad_check_suite(seed=seed, tol=tol).items()]


# -- FLOPs -----------------------------------------------------------------------


def flops_suite() -> list[Check]:
    out = []
    d_m = analysis.PAPER_D * 4 * 16
    for g, ref in analysis.REFERENCE_GATE_TFLOPS.items():
        got = analysis.gate_flops(analysis.PAPER_D, d_m // g, 4, analysis.PAPER_BATCH_TOKENS) / 1e12
        out.append(_le(f"gate_tflops_g{g}", abs(got - ref) / ref, 0.01, f"{got:.4g} vs {ref}"))
    dense = analysis.model_flops(analysis.FlopsModel.paper("dense")).train_total / 1e21
    van = analysis.model_flops(analysis.FlopsModel.paper("vanillam", 16, 1, 4096)).train_total / 1e21
    pkm = analysis.model_flops(analysis.FlopsModel.paper("pkm", 16, 1, 4096)).train_total / 1e21
    out.append(_le("dense_train_zflops", abs(dense - 0.212) / 0.212, 0.05, f"{dense:.4f} vs 0.212"))
    out.append(_le("vanillam_train_zflops", abs(van - 0.333) / 0.333, 0.05, f"{van:.4f} vs 0.333"))
    out.append(Check("pkm_below_dense", pkm - dense, 0.0, pkm < dense, f"{pkm:.4f} < {dense:.4f}"))
    return out


# -- overlap and load balance ------------------------------------------------------


def overlap_identity(max_B: int = 64) -> Check:
    worst = 0.0
    for B in range(1, max_B + 1):
        for b in range(1, B + 1):
            for g in (1, 3):
                closed = analysis.expected_overlap_closed_form(B, b, g)
                worst = max(worst, abs(analysis.expected_overlap_analytical(B, b, g) - closed) / closed)
    return _le("overlap_series_equals_closed_form", worst, 1e-9, f"all b <= B <= {max_B}")


def randhash_trace(B: int, b: int, g: int, seqs: int, seq_len: int, vocab: int, seed: int) -> analysis.RoutingTrace:
    geo = MemoryGeometry(8, B * g, g, b * g)
    table = build_randhash(vocab, geo, seed).table
    rng = RngStream(seed, "verify/tokens").generator()
    tokens = rng.integers(0, vocab, size=(seqs, seq_len))
    events = [analysis.RoutingEvent(0, s, p, int(t), tuple(int(v) for v in table[t]))
              for s in range(seqs) for p, t in enumerate(tokens[s])]
    return analysis.RoutingTrace(events, g, B)


def overlap_monte_carlo(B: int = 16, b: int = 1, g: int = 4096, pairs: int = 100_000, seed: int = 0) -> Check:
    seqs = 100
    trace = randhash_trace(B, b, g, seqs, 128, 50265, seed)
    est = analysis.expected_overlap_empirical(trace, pairs // seqs, RngStream(seed, "verify/pairs").generator())
    closed = analysis.expected_overlap_closed_form(B, b, g)
    z = abs(est.mean - closed) / est.std_error
    return _le(f"randhash_overlap_mc_B{B}_b{b}_g{g}", z, 3.0,
               f"estimate {est.mean:.2f} +- {est.std_error:.2f} vs {closed:g} ({est.pairs} pairs)")


def load_balance_check(events: int = 1_000_000, B: int = 16, seed: int = 0) -> list[Check]:
    vocab = 50265
    geo = MemoryGeometry(8, B, 1, 1)
    table = build_randhash(vocab, geo, seed).table
    tokens = RngStream(seed, "verify/balance").generator().integers(0, vocab, size=events)
    hist = np.sort(analysis.block_usage_counts(table[tokens], B) / events)[::-1]
    return [
        _le("randhash_balance_max_over_min", hist[0] / hist[-1], 1.2, f"{events} events, B={B}"),
        _le("histogram_sums_to_one", abs(math.fsum(hist) - 1.0), 1e-12),
    ]


def overlap_suite(seed: int = 0) -> list[Check]:
    return [overlap_identity(), overlap_monte_carlo(seed=seed),
            overlap_monte_carlo(16, 2, 8, seed=seed), *load_balance_check(seed=seed)]


def run_suite(name: str, seed: int = 0) -> dict:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    names = SUITES[:-1] if name == "all" else (name,)
    fns = {"equivalence": lambda: equivalence_suite(seed), "gradcheck": lambda: gradcheck_suite(seed),
           "flops": flops_suite, "overlap": lambda: overlap_suite(seed)}
    report = {"suites": {}, "passed": True}
    for n in names:
        t0 = time.perf_counter()
        checks = fns[n]()
        ok = all(c.passed for c in checks)
        report["suites"][n] = {"passed": ok, "seconds": time.perf_counter() - t0,
                               "checks": [c.as_dict() for c in checks]}
        report["passed"] &= ok
    return report
