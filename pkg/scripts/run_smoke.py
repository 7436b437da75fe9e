"""Train every smoke variant and print a summary table.

    python3 scripts/run_smoke.py --out runs/smoke [--steps 2000] [--variants dense switch]
"""

import argparse
import json
import math
from pathlib import Path

from sffn.smoke import SMOKE_VARIANTS, run_variant


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variants", nargs="*", default=list(SMOKE_VARIANTS), choices=list(SMOKE_VARIANTS))
    args = p.parse_args()

    summary = []
    print(f"{'variant':<10} {'exit':>4} {'ppl@0':>8} {'ppl@end':>8} {'loss@200':>9} {'loss@end':>9} {'sec':>6}")
    for name in args.variants:
        r = run_variant(name, Path(args.out) / name, steps=args.steps, seed=args.seed)
        first = r.train_loss_at(min(200, args.steps)) if args.steps else math.nan
        row = {"variant": name, "exit": r.exit_code, "initial_ppl": r.initial_ppl, "final_ppl": r.final_ppl,
               "train_loss_first_window": first, "train_loss_last_window": r.rows[-1]["train_loss"],
               "seconds": r.seconds}
        summary.append(row)
        print(f"{name:<10} {r.exit_code:>4} {r.initial_ppl:>8.2f} {r.final_ppl:>8.2f} {first:>9.4f} "
              f"{row['train_loss_last_window']:>9.4f} {r.seconds:>6.1f}", flush=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
