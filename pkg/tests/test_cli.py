import json

import numpy as np
import pytest

from sffn.cli import build_parser, main
from sffn.config import DEFAULTS, SCHEMA, ConfigError, ExperimentConfig, parse_override
from sffn.io import load_checkpoint


@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "corpus.txt"
    path.write_bytes(b"to be or not to be, that is the question. " * 60 + rng.bytes(300))
    return path


def write_config(tmp_path, corpus, name="cfg.json", **over):
    cfg = {
        "model": {"layers": 2, "d": 16, "seq_len": 16, "d_m": 64, "g": 8, "k": 8},
        "selector": {"kind": "randhash"},
        "data": {"path": str(corpus)},
        "steps": 6, "eval_interval": 3, "eval_windows": 4, "seed": 1,
        "out": str(tmp_path / "run"),
    }
    for k, v in over.items():
        cfg[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_all_outputs(tmp_path, corpus, capsys):
    cfg = write_config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert sorted(p.name for p in run.iterdir()) == ["checkpoint.sffn", "manifest.json", "metrics.csv", "trace.csv"]
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_ppl,aux_loss"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [0, 3, 6]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "completed" and manifest["seed"] == 1
    assert len(manifest["config_hash"]) == 64 and manifest["version"]
    trace = (run / "trace.csv").read_text().splitlines()
    assert trace[0] == "layer,seq,pos,token_id,block_ids" and len(trace) == 1 + 4 * 16


def test_same_config_and_seed_reproduce_metrics_bytes(tmp_path, corpus):
    cfg = write_config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "2"]) == 0
    a, b, c = ((tmp_path / x / "metrics.csv").read_bytes() for x in "abc")
    assert a == b and a != c
    ca, cb = (load_checkpoint(tmp_path / x / "checkpoint.sffn") for x in "ab")
    assert all(np.array_equal(ca[k], cb[k]) for k in ca)
    ha, hc = (json.loads((tmp_path / x / "manifest.json").read_text())["config_hash"] for x in "ac")
    assert ha != hc


def test_eval_reproduces_final_validation(tmp_path, corpus, capsys):
    cfg = write_config(tmp_path, corpus, selector={"kind": "pkm", "d_l": 4}, model={
        "layers": 2, "d": 16, "seq_len": 16, "d_m": 64, "g": 1, "k": 8})
    assert main(["train", "--config", str(cfg)]) == 0
    final = json.loads(capsys.readouterr().out)["val_ppl"]
    assert main(["eval", "--config", str(cfg), "--trace", str(tmp_path / "t.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["val_ppl"] == final
    assert (tmp_path / "t.csv").exists()


def test_steps_zero_gives_initial_eval_only(tmp_path, corpus):
    cfg = write_config(tmp_path, corpus, steps=0)
    assert main(["train", "--config", str(cfg)]) == 0
    assert len((tmp_path / "run" / "metrics.csv").read_text().splitlines()) == 2


def test_dotted_overrides(tmp_path, corpus):
    cfg = write_config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg), "--steps=3", "--selector.kind=avgk"]) == 0
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert m["config"]["steps"] == 3 and m["config"]["selector"]["kind"] == "avgk"
    assert parse_override("--model.d=64") == (["model", "d"], 64)
    assert parse_override("--data.path=x.txt") == (["data", "path"], "x.txt")


def test_invalid_config_lists_fields(tmp_path, corpus, capsys):
    cfg = write_config(tmp_path, corpus, bogus=1, steps=-2)
    assert main(["train", "--config", str(cfg), "--model.widht=3"]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "steps" in err and "widht" in err
    assert not (tmp_path / "run").exists()


def test_inconsistent_geometry_is_config_error(tmp_path, corpus, capsys):
    cfg = write_config(tmp_path, corpus, model={"layers": 2, "d": 16, "seq_len": 16, "d_m": 60, "g": 8, "k": 8})
    assert main(["train", "--config", str(cfg)]) == 2
    assert "model:" in capsys.readouterr().err


def test_missing_corpus_names_path(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "absent.txt")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "absent.txt" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 2
    assert "none.json" in capsys.readouterr().err


def test_divergence_exit_code_keeps_partial_metrics(tmp_path, corpus, monkeypatch):
    from sffn import training
    from sffn.training import LossReport

    real = training.train_step

    def bad(model, opt, batch, lr, step):
        rep = real(model, opt, batch, lr, step)
        return LossReport(float("inf"), 0.0, 0.0, rep.tokens) if step == 4 else rep

    monkeypatch.setattr(training, "train_step", bad)
    cfg = write_config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg)]) == 3
    run = tmp_path / "run"
    assert len((run / "metrics.csv").read_text().splitlines()) == 3  # header, step 0, step 3
    assert json.loads((run / "manifest.json").read_text())["status"] == "diverged"


def test_verify_flops_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["verify", "--suite", "flops", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    checks = report["suites"]["flops"]["checks"]
    gate = [c for c in checks if c["name"].startswith("gate_tflops")]
    assert len(gate) == 9 and all(c["passed"] and c["observed"] <= 0.01 for c in gate)
    assert report["passed"]


def test_verify_equivalence_passes(capsys):
    assert main(["verify", "--suite", "equivalence"]) == 0


def test_verify_unknown_suite_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--suite", "nonsense"])
    assert exc.value.code == 2


def test_unrecognized_argument_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "stray"])
    assert exc.value.code == 2


def test_analyze_analytical_only(tmp_path, corpus):
    cfg = write_config(tmp_path, corpus)
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "an")]) == 0
    rows = (tmp_path / "an" / "analysis.csv").read_text().splitlines()
    assert rows[0] == "method,g,k,E,metric,value"
    assert any("expected_overlap_closed_form,1.0" in r for r in rows)  # 8 * 1 / 8
    assert any("paper-scale reference, not reproduced" in r for r in rows)
    report = json.loads((tmp_path / "an" / "analysis.json").read_text())
    assert "overlap" not in report and report["flops"]["convention_factor"] == 4.0


def test_analyze_with_randhash_trace(tmp_path, corpus):
    cfg = write_config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["analyze", "--config", str(cfg), "--trace", str(tmp_path / "run" / "trace.csv"),
                 "--out", str(tmp_path / "an")]) == 0
    report = json.loads((tmp_path / "an" / "analysis.json").read_text())
    hist = report["histogram"]
    assert len(hist) == 8 and abs(sum(hist) - 1.0) <= 1e-12
    assert hist == sorted(hist, reverse=True)
    assert 0 <= report["overlap"]["mean"] <= 8


def test_analyze_rejects_malformed_trace(tmp_path, corpus, capsys):
    cfg = write_config(tmp_path, corpus)
    bad = tmp_path / "bad.csv"
    bad.write_text("layer,seq,pos,token_id,block_ids\n0,0,0,1,3\n0,0,1,1,oops\n")
    assert main(["analyze", "--config", str(cfg), "--trace", str(bad)]) == 1
    assert "line 3" in capsys.readouterr().err


def test_thread_env_validated(tmp_path, corpus, monkeypatch, capsys):
    monkeypatch.setenv("SFFN_THREADS", "zero")
    assert main(["analyze", "--config", str(write_config(tmp_path, corpus))]) == 2
    assert "SFFN_THREADS" in capsys.readouterr().err


def test_schema_is_published_and_matches_defaults(capsys):
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out) == SCHEMA
    ExperimentConfig.from_dict(DEFAULTS)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"selector": {"kind": "dense", "extra": 1}})


def test_example_configs_validate():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(p for p in root.glob("*.json") if p.name != "schema.json")
    assert files
    for f in files:
        ExperimentConfig.load(f)


def test_parser_subcommands():
    parser = build_parser()
    for cmd in ("train", "eval", "verify", "analyze", "schema"):
        assert cmd in parser.format_help()


def test_published_schema_file_is_current():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "schema.json"
    assert json.loads(path.read_text()) == SCHEMA
