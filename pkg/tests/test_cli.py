import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gcpc.checkpoint import load_checkpoint
from gcpc.cli import COMPARE_COLUMNS, run_cli

TINY = """\
[corpus]
n_phones = 4
dim = 8
max_phones = 5
n_pretrain = 16
n_train = 12
n_test = 5
[topology]
enc_layers = 1
enc_width = 8
ar_width = 8
genc_width = 6
prior_width = 8
pred_width = 6
[optim]
batch_size = 4
prior_steps = 20
pretrain_steps = 5
finetune_steps = 4
[run]
analysis_frames = 100
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _metrics(run):
    return [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]


def test_full_workflow(tmp_path, cfg_file):
    run = tmp_path / "run"
    base = ["--config", str(cfg_file), "--run-dir", str(run)]
    assert run_cli(["gen-data", *base]) == 0
    data = run / "corpus.gcds"
    assert data.exists() and (run / "config.resolved").exists()
    for d in ("checkpoints", "tables", "embeddings"):
        assert (run / d).is_dir()

    assert run_cli(["train-prior", *base, "--corpus", str(data)]) == 0
    prior = run / "checkpoints" / "prior-s0.gcpc"
    assert prior.exists()

    assert run_cli(["pretrain", *base, "--corpus", str(data), "--prior", str(prior)]) == 0
    ck = run / "checkpoints" / "pretrain-gcpc-s0.gcpc"
    store, meta = load_checkpoint(ck)
    assert meta["scheme"] == "gcpc" and "genc.dense0.W" in store

    assert run_cli(["finetune", *base, "--corpus", str(data), "--checkpoint", str(ck)]) == 0
    assert run_cli(["finetune", *base, "--corpus", str(data)]) == 0
    model = run / "checkpoints" / "transducer-gcpc-rnnt-s0.gcpc"
    scratch = run / "checkpoints" / "transducer-scratch-rnnt-s0.gcpc"
    assert model.exists() and scratch.exists()

    assert run_cli(["evaluate", *base, "--corpus", str(data), "--model", str(scratch),
                    "--baseline", str(scratch)]) == 0
    ev = _rows(run / "tables" / "evaluate.csv")
    assert float(ev[0]["werr"]) == 0.0

    assert run_cli(["analyze", *base, "--corpus", str(data), "--checkpoint", str(ck)]) == 0
    emb = _rows(run / "embeddings" / "pretrain-gcpc-s0.csv")
    assert list(emb[0]) == ["x", "y", "phone_label"] and len(emb) > 10
    events = [m["event"] for m in _metrics(run)]
    assert events == ["gen-data", "train-prior", "pretrain", "finetune", "finetune", "evaluate", "analyze"]
    report = _metrics(run)[-1]
    assert report["fisher_ratio"] > 0


def test_compare_table(tmp_path, cfg_file):
    run = tmp_path / "cmp"
    code = run_cli(["compare", "--config", str(cfg_file), "--run-dir", str(run), "--seeds", "2",
                    "--cells", "scratch:rnnt,cpc:rnnt,gcpc:rnnt+lc", "--save-checkpoints"])
    assert code == 0
    rows = _rows(run / "tables" / "compare.csv")
    assert list(rows[0]) == COMPARE_COLUMNS
    assert len(rows) == 6
    for r in rows:
        if r["scheme"] == "scratch":
            assert float(r["werr"]) == 0.0
    assert (run / "tables" / "compare_summary.csv").exists()
    assert (run / "checkpoints" / "pretrain-gcpc-s1.gcpc").exists()


def test_same_config_and_seed_is_bit_identical(tmp_path, cfg_file):
    outs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert run_cli(["compare", "--config", str(cfg_file), "--run-dir", str(run), "--seeds", "1",
                        "--cells", "gcpc:rnnt", "--save-checkpoints"]) == 0
        metrics = [{k: v for k, v in m.items() if k != "wall_time"} for m in _metrics(run)]
        outs.append((metrics, (run / "checkpoints" / "pretrain-gcpc-s0.gcpc").read_bytes(),
                     (run / "tables" / "compare.csv").read_text().splitlines()))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]
    assert outs[0][2] == outs[1][2]


def test_gcpc_seed_env_overrides(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("GCPC_SEED", "7")
    run = tmp_path / "env"
    assert run_cli(["train-prior", "--config", str(cfg_file), "--run-dir", str(run)]) == 0
    assert (run / "checkpoints" / "prior-s7.gcpc").exists()
    assert "seed = 7" in (run / "config.resolved").read_text()


def test_set_override(tmp_path, cfg_file):
    run = tmp_path / "ov"
    assert run_cli(["gen-data", "--config", str(cfg_file), "--run-dir", str(run),
                    "--set", "corpus.n_test=2"]) == 0
    assert "n_test = 2" in (run / "config.resolved").read_text()


@pytest.mark.parametrize("argv,code", [
    (["nonsense"], 2),
    ([], 2),
    (["compare", "--cells", "foo:rnnt"], 2),
    (["gen-data", "--set", "novalue"], 2),
    (["gen-data", "--set", "contrastive.kappa=-1"], 3),
    (["gen-data", "--set", "optim.bogus=1"], 3),
])
def test_exit_codes(argv, code, tmp_path, capsys):
    assert run_cli(argv + (["--run-dir", str(tmp_path)] if argv and argv[0] != "nonsense" else [])) == code
    err = capsys.readouterr().err
    assert err
    if code == 3 and "kappa" in " ".join(argv):
        assert "kappa" in err


def test_data_errors(tmp_path, cfg_file):
    bad = tmp_path / "bad.gcds"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    base = ["--config", str(cfg_file), "--run-dir", str(tmp_path / "r")]
    assert run_cli(["train-prior", *base, "--corpus", str(bad)]) == 4
    assert run_cli(["pretrain", *base, "--set", "run.scheme=gcpc"]) == 4     # no --prior
    assert run_cli(["analyze", *base, "--checkpoint", str(tmp_path / "missing.gcpc")]) == 4


def test_gcpc_seed_must_be_integer(tmp_path, monkeypatch):
    monkeypatch.setenv("GCPC_SEED", "abc")
    assert run_cli(["gen-data", "--run-dir", str(tmp_path)]) == 3


def test_console_entry_usage():
    out = subprocess.run([sys.executable, "-m", "gcpc.cli", "frobnicate"], capture_output=True, text=True)
    assert out.returncode == 2
    assert "usage" in out.stderr
