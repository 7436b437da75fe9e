"""Desk-scale training smoke: the eight selector variants on the byte-level corpus."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path

from .cli import METRICS_FILE, main

DEFAULT_CORPUS = Path(__file__).resolve().parents[2] / "data" / "shakespeare.txt"

# d = 64, so d * 4 = 256 is the largest block; every sparse variant keeps
# k = 256 active cells of d_m = 1024 (E = 4), the same budget as one dense FFN
SMOKE_VARIANTS: dict[str, dict] = {
    "dense": {"model": {"d_m": 1024, "g": 1, "k": 1024}, "selector": {"kind": "dense"}},
    "vanillam": {"model": {"d_m": 1024, "g": 1, "k": 256}, "selector": {"kind": "vanillam"}},
    "randhash": {"model": {"d_m": 1024, "g": 256, "k": 256}, "selector": {"kind": "randhash"}},
    "switch": {"model": {"d_m": 1024, "g": 256, "k": 256}, "selector": {"kind": "switch"}},
    "avgk-g256": {"model": {"d_m": 1024, "g": 256, "k": 256}, "selector": {"kind": "avgk"}},
    "avgk-g16": {"model": {"d_m": 1024, "g": 16, "k": 256}, "selector": {"kind": "avgk"}},
    "pkm": {"model": {"d_m": 1024, "g": 1, "k": 256}, "selector": {"kind": "pkm", "d_l": 16}},
    "pkm_ffn": {"model": {"d_m": 1024, "g": 1, "k": 256}, "selector": {"kind": "pkm_ffn", "d_l": 16}},
}


@dataclass
class SmokeResult:
    name: str
    exit_code: int
    out: Path
    seconds: float
    rows: list[dict]

    @property
    def metrics_bytes(self) -> bytes:
        return (self.out / METRICS_FILE).read_bytes()

    @property
    def initial_ppl(self) -> float:
        return self.rows[0]["val_ppl"]

    @property
    def final_ppl(self) -> float:
        return self.rows[-1]["val_ppl"]

    def train_loss_at(self, step: int) -> float:
        """Mean training loss over the eval interval ending at ``step``."""
        for r in self.rows:
            if r["step"] == step:
                return r["train_loss"]
        raise KeyError(f"no metrics row at step {step}")


def read_metrics(path) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    return [{"step": int(r["step"]), "train_loss": float(r["train_loss"]), "val_ppl": float(r["val_ppl"]),
             "aux_loss": float(r["aux_loss"])} for r in rows]


def run_variant(name: str, out: Path, steps: int = 2000, seed: int = 0, corpus: Path = DEFAULT_CORPUS,
                eval_interval: int = 200) -> SmokeResult:
    import json

    spec = SMOKE_VARIANTS[name]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg = {**spec, "steps": steps, "eval_interval": eval_interval, "seed": seed,
           "data": {"path": str(corpus)}, "out": str(out)}
    cfg_path.write_text(json.dumps(cfg, indent=2))
    t0 = time.perf_counter()
    code = main(["train", "--config", str(cfg_path)])
    seconds = time.perf_counter() - t0
    rows = read_metrics(out / METRICS_FILE) if (out / METRICS_FILE).exists() else []
    return SmokeResult(name, code, out, seconds, rows)
