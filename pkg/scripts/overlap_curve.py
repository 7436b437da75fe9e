"""Expected shared cells E[r] versus block size: closed form and RandHash Monte Carlo.

    python3 scripts/overlap_curve.py [--d-m 4096] [--k 256] [--pairs 200]
"""

import argparse

from sffn.analysis import (
    expected_overlap_analytical,
    expected_overlap_empirical,
    expected_overlap_series_as_printed,
)
from sffn.tensor import RngStream
from sffn.verify import randhash_trace


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--d-m", type=int, default=4096)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--pairs", type=int, default=200, help="pairs per sequence")
    p.add_argument("--seqs", type=int, default=50)
    p.add_argument("--vocab", type=int, default=50265)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    print(f"d_m={args.d_m} k={args.k}: closed form k^2/d_m = {args.k ** 2 / args.d_m:g}")
    print(f"{'g':>6} {'B':>6} {'b':>5} {'series':>9} {'as printed':>11} {'MC':>9} {'+-':>6}")
    g = 1
    while g <= args.k:
        B, b = args.d_m // g, args.k // g
        trace = randhash_trace(B, b, g, args.seqs, 128, args.vocab, args.seed)
        est = expected_overlap_empirical(trace, args.pairs, RngStream(args.seed, f"curve/{g}").generator())
        print(f"{g:>6} {B:>6} {b:>5} {expected_overlap_analytical(B, b, g):>9.4f} "
              f"{expected_overlap_series_as_printed(B, b, g):>11.4f} {est.mean:>9.4f} {est.std_error:>6.3f}")
        g *= 4


if __name__ == "__main__":
    main()
