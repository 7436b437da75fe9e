"""Print the learned-gate FLOPs column and whole-model training ZFLOPs at paper scale.

    python3 scripts/flops_table.py [--factor 4] [--csv out.csv]
"""

import argparse
import csv
import sys

from sffn.analysis import (
    PAPER_BATCH_TOKENS,
    PAPER_D,
    REFERENCE_GATE_TFLOPS,
    FlopsModel,
    gate_flops,
    lookup,
    model_flops,
    reference_tables,
)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--factor", type=float, default=4.0, help="training FLOPs / forward FLOPs")
    p.add_argument("--csv", help="also write (method, g, k, E, metric, value) rows here")
    args = p.parse_args()

    rows = []
    d_m = PAPER_D * 4 * 16
    print("learned gate, 4 S-FFN layers, one 0.5M-token batch")
    print(f"{'g':>6} {'B':>6} {'TFLOPs':>10} {'ref':>8} {'rel err':>8}")
    for g, ref in REFERENCE_GATE_TFLOPS.items():
        tf = gate_flops(PAPER_D, d_m // g, 4, PAPER_BATCH_TOKENS, args.factor) / 1e12
        print(f"{g:>6} {d_m // g:>6} {tf:>10.4g} {ref:>8} {abs(tf - ref) / ref:>8.2%}")
        rows.append(("gate", g, 4096, 16, "gate_tflops_per_batch", tf))

    print("\ntraining ZFLOPs at 60B tokens (reference column: paper-scale, not reproduced)")
    print(f"{'method':<10} {'g':>5} {'E':>3} {'k':>5} {'ZFLOPs':>8} {'ref':>6}")
    seen = set()
    for r in reference_tables():
        key = (r.method, r.g, r.E, r.k)
        if key in seen:
            continue
        seen.add(key)
        kind = {"avg-k": "avgk", "pkm-ffn": "pkm_ffn"}.get(r.method, r.method)
        z = model_flops(FlopsModel.paper(kind, r.E, r.g, r.k), factor=args.factor).train_total / 1e21
        print(f"{r.method:<10} {r.g:>5} {r.E:>3} {r.k:>5} {z:>8.4f} {r.train_zflops:>6}")
        rows.append((kind, r.g, r.k, r.E, "train_zflops", z))
    print(f"\nreference perplexity, dense: {lookup('dense')}")

    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "g", "k", "E", "metric", "value"])
            w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
