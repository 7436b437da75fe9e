"""``sffn`` command line: train, eval, verify, analyze.

Exit codes: 0 success, 1 runtime failure (missing corpus, failed checks),
2 usage or config error, 3 training diverged (partial metrics kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path


from . import analysis
from .config import SCHEMA, ConfigError, ExperimentConfig
from .io import (
    atomic_write_json,
    atomic_write_text,
    load_checkpoint,
    metrics_to_csv,
    read_trace,
    save_checkpoint,
    write_trace,
)
from .model import TinyLM
from .tensor import RngStream
from .training import (
    METRICS_COLUMNS,
    TrainingDiverged,
    eval_windows,
    evaluate,
    load_corpus,
    split_corpus,
    train_lm,
)
from .verify import SUITES, run_suite

log = logging.getLogger("sffn")

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.sffn"
MANIFEST_FILE = "manifest.json"
TRACE_FILE = "trace.csv"
REFERENCE_LABEL = "paper-scale reference, not reproduced"


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{base}+g{rev}" if rev else base


@contextmanager
def thread_limit():
    """Cap BLAS threads at ``SFFN_THREADS`` (default 1) for bit-determinism."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("SFFN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([f"SFFN_THREADS: expected a positive integer, got {raw!r}"]) from None
    if n < 1:
        raise ConfigError([f"SFFN_THREADS: expected a positive integer, got {raw!r}"])
    with threadpool_limits(limits=n):
        yield


def resolve_config(args, overrides: list[str]) -> ExperimentConfig:
    extra = list(overrides)
    if getattr(args, "seed", None) is not None:
        extra.append(f"--seed={args.seed}")
    if getattr(args, "out", None) is not None:
        extra.append(f"--out={json.dumps(args.out)}")
    if args.config is None:
        return ExperimentConfig.from_dict({}, extra)
    return ExperimentConfig.load(args.config, extra)


# -- train / eval ------------------------------------------------------------------


def cmd_train(args, overrides) -> int:
    cfg = resolve_config(args, overrides)
    out = Path(cfg.raw["out"])
    corpus = load_corpus(cfg.raw["data"]["path"])
    manifest = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "version": version_string(),
        "config": cfg.raw,
        "metrics_columns": list(METRICS_COLUMNS),
        "status": "running",
    }
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / MANIFEST_FILE, manifest)
    try:
        result = train_lm(cfg.model_config(), corpus, cfg.raw["steps"], cfg.seed, cfg.train_config(),
                          record_trace=cfg.raw["record_trace"])
    except TrainingDiverged as exc:
        atomic_write_text(out / METRICS_FILE, metrics_to_csv(exc.metrics, METRICS_COLUMNS))
        atomic_write_json(out / MANIFEST_FILE, {**manifest, "status": "diverged", "diverged_at": exc.step})
        print(f"error: {exc}; partial metrics in {out / METRICS_FILE}", file=sys.stderr)
        return 3
    atomic_write_text(out / METRICS_FILE, metrics_to_csv(result.metrics, METRICS_COLUMNS))
    save_checkpoint(out / CHECKPOINT_FILE, result.model.state_dict())
    if cfg.raw["record_trace"]:
        write_trace(out / TRACE_FILE, result.trace)
    final = result.metrics[-1]
    atomic_write_json(out / MANIFEST_FILE, {**manifest, "status": "completed", "final": final})
    print(json.dumps({"out": str(out), **final}))
    return 0


def cmd_eval(args, overrides) -> int:
    cfg = resolve_config(args, overrides)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.raw["out"]) / CHECKPOINT_FILE
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = TinyLM(cfg.model_config(), cfg.seed)
    model.load_state_dict(load_checkpoint(ckpt))
    tc = cfg.train_config()
    _, val = split_corpus(load_corpus(cfg.raw["data"]["path"]), model.config.seq_len, tc.val_fraction)
    trace = [] if args.trace else None
    ppl = evaluate(model, eval_windows(val, model.config.seq_len, tc.eval_windows), trace=trace)
    if args.trace:
        write_trace(args.trace, trace)
    print(json.dumps({"checkpoint": str(ckpt), "val_ppl": ppl}))
    return 0


# -- verify ------------------------------------------------------------------------


def cmd_verify(args, overrides) -> int:
    if overrides:
        raise ConfigError([f"{o}: verify takes no config overrides" for o in overrides])
    report = run_suite(args.suite, seed=args.seed or 0)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0 if report["passed"] else 1


# -- analyze -----------------------------------------------------------------------


def analysis_rows(cfg: ExperimentConfig, trace_path=None, seed: int = 0, pairs: int = 1000) -> tuple[list, dict]:
    mc = cfg.model_config()
    geo = mc.geometry
    kind = mc.selector.kind
    E = geo.E
    rows: list[tuple] = []

    def add(method, metric, value, g=geo.g, k=geo.k, e=E):
        rows.append((method, g, k, e, metric, float(value)))

    tokens = cfg.raw["steps"] * cfg.raw["batch_size"] * mc.seq_len
    rep = analysis.model_flops(analysis.FlopsModel.from_config(mc), tokens=max(tokens, 1))
    for key in ("gate_flops", "memory_flops", "model_flops_per_token", "train_total"):
        add(kind, key, getattr(rep, key))
    closed = analysis.expected_overlap_closed_form(geo.B, geo.b, geo.g)
    add(kind, "expected_overlap_closed_form", closed)
    report: dict = {"flops": rep.as_dict(), "expected_overlap_closed_form": closed,
                    "selector": kind, "geometry": {"d": geo.d, "d_m": geo.d_m, "g": geo.g, "k": geo.k}}
    if trace_path is not None:
        trace = read_trace(trace_path, geo.g, geo.B)
        est = analysis.expected_overlap_empirical(trace, pairs, RngStream(seed, "analyze/pairs").generator())
        hist = analysis.load_balance_histogram(trace, geo.B)
        add(kind, "expected_overlap_empirical", est.mean)
        add(kind, "expected_overlap_std_error", est.std_error)
        for layer, v in est.per_layer.items():
            add(kind, f"expected_overlap_layer{layer}", v)
        for i, frac in enumerate(hist):
            add(kind, f"usage_fraction_rank{i}", frac)
        report.update(overlap=est.as_dict(), histogram=hist.tolist())
    refs = []
    for r in analysis.reference_tables():
        method = r.method if r.aggregator is None else f"{r.method}-{r.aggregator}"
        add(f"{method} [{REFERENCE_LABEL}]", "ood_ppl", r.ood_ppl, r.g, r.k, r.E)
        add(f"{method} [{REFERENCE_LABEL}]", "train_zflops", r.train_zflops, r.g, r.k, r.E)
        refs.append({"method": method, "g": r.g, "E": r.E, "k": r.k, "ood_ppl": r.ood_ppl,
                     "train_zflops": r.train_zflops})
    report["reference"] = {"label": REFERENCE_LABEL, "rows": refs}
    return rows, report


def cmd_analyze(args, overrides) -> int:
    cfg = resolve_config(args, overrides)
    rows, report = analysis_rows(cfg, args.trace, seed=cfg.seed, pairs=args.pairs)
    out = Path(args.out) if args.out else Path(cfg.raw["out"])
    lines = ["method,g,k,E,metric,value"]
    lines += [f'"{m}",{g},{k},{e!r},{metric},{value!r}' for m, g, k, e, metric, value in rows]
    atomic_write_text(out / "analysis.csv", "\n".join(lines) + "\n")
    atomic_write_json(out / "analysis.json", report)
    print(json.dumps({"csv": str(out / "analysis.csv"), "json": str(out / "analysis.json")}))
    return 0


def cmd_schema(args, overrides) -> int:
    print(json.dumps(SCHEMA, indent=2))
    return 0


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sffn", description=__doc__.splitlines()[0], allow_abbrev=False,
                                epilog="Config keys can be overridden as --section.key=value, e.g. --model.d=64.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory (overrides config 'out')"):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="overrides config 'seed'")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("train", help="train a model and write metrics, checkpoint, manifest, trace",
                        allow_abbrev=False)
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="validation perplexity of a checkpoint", allow_abbrev=False)
    common(sp)
    sp.add_argument("--checkpoint", help="defaults to <out>/checkpoint.sffn")
    sp.add_argument("--trace", help="also write the routing trace CSV here")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("verify", help="run property suites, print a JSON report", allow_abbrev=False)
    sp.add_argument("--suite", required=True, choices=SUITES)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="also write the JSON report to this file")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("analyze", help="FLOPs, E[r], load balance; analytical-only without --trace",
                        allow_abbrev=False)
    common(sp, "directory for analysis.csv / analysis.json")
    sp.add_argument("--trace", help="routing trace CSV from a previous run")
    sp.add_argument("--pairs", type=int, default=1000, help="position pairs per sequence")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("schema", help="print the config JSON schema")
    sp.set_defaults(fn=cmd_schema)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    bad = [t for t in extra if not (t.startswith("--") and "=" in t)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    try:
        with thread_limit():
            return args.fn(args, extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
