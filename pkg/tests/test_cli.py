import csv
import json
import logging

import pytest

from rltab import cli
from rltab.checkpoint import load_checkpoint, save_checkpoint
from rltab.config import OUTPUT_DIR_ENV
from rltab.policy import new_policy

TINY = {
    "policy": {"embed_dim": 16, "hidden": 32, "value_hidden": 16, "mle_epochs": 12,
               "mle_batch_size": 8, "mle_lr": 1e-2},
    "ppo": {"epochs": 1, "rollouts_per_epoch": 16, "minibatch_size": 16, "update_passes": 1},
    "discriminators": {"embed_dim": 8, "rnn_hidden": 8, "head": [8, 8], "batch_size": 16, "steps": 1},
    "generate": {"count": 20},
}


def write_config(path, out, **extra):
    cfg = json.loads(json.dumps(TINY))
    cfg["paths"] = {"output_dir": str(out)}
    for section, values in extra.items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d / "cfg.json", d / "out")
    assert cli.main(["discover", "--config", cfg]) == 0
    assert cli.main(["pretrain", "--config", cfg]) == 0
    return d, cfg


def lines(path):
    return path.read_text().splitlines()


def test_discover_artifacts_and_determinism(run, tmp_path):
    d, _ = run
    pc = json.loads((d / "out" / "pcrit.json").read_text())
    assert set(pc["meta"]) >= {"config_hash", "seed", "format_version"}
    assert (d / "out" / "association.csv.meta.json").exists()
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out")
    assert cli.main(["discover", "--config", cfg]) == 0
    assert (tmp_path / "out" / "pcrit.json").read_bytes() == (d / "out" / "pcrit.json").read_bytes()
    assert (tmp_path / "out" / "association.csv").read_bytes() == (d / "out" / "association.csv").read_bytes()


def test_discover_high_threshold_warns(tmp_path, caplog):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out")
    with caplog.at_level(logging.WARNING, logger="rltab"):
        assert cli.main(["discover", "--config", cfg, "--delta-thresh", "0.99"]) == 0
    assert json.loads((tmp_path / "out" / "pcrit.json").read_text())["pairs"] == []
    assert any("no feature pair" in r.message for r in caplog.records)


def test_train_zero_epochs_keeps_pretrained_policy(run, tmp_path):
    d, _ = run
    out = tmp_path / "out"
    out.mkdir()
    for name in ("pcrit.json", "pretrain.ckpt.json"):
        (out / name).write_bytes((d / "out" / name).read_bytes())
    cfg = write_config(tmp_path / "cfg.json", out)
    assert cli.main(["train", "--config", cfg, "--epochs", "0"]) == 0
    trained, _, _ = load_checkpoint(out / "checkpoint.json")
    pre, _, _ = load_checkpoint(out / "pretrain.ckpt.json")
    assert trained.theta.equal(pre.theta)
    assert len(lines(out / "train_log.jsonl")) == 1


def test_train_log_has_one_record_per_epoch(run):
    d, cfg = run
    assert cli.main(["train", "--config", cfg]) == 0
    log = [json.loads(x) for x in lines(d / "out" / "train_log.jsonl")]
    assert "meta" in log[0] and [r["epoch"] for r in log[1:]] == [1]
    _, ens, meta = load_checkpoint(d / "out" / "checkpoint.json")
    assert ens is not None and meta["epoch"] == 1


def test_generate(run, tmp_path):
    d, cfg = run
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["generate", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["generate", "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(a.open()))
    assert len(rows) == 21
    meta = json.loads((tmp_path / "a.csv.meta.json").read_text())
    assert meta["generation"]["written"] == 20 and 0 <= meta["generation"]["malformed_rate"] <= 1


def test_generate_zero_rows_is_header_only(run, tmp_path):
    _, cfg = run
    out = tmp_path / "z.csv"
    assert cli.main(["generate", "--config", cfg, "--count", "0", "--out", str(out)]) == 0
    assert len(lines(out)) == 1


def test_generate_retry_cap(run, tmp_path, prep):
    _, cfg = run
    ck = save_checkpoint(tmp_path / "uniform.json", new_policy(prep.vocab, embed_dim=4, hidden=4))
    out = tmp_path / "u.csv"
    code = cli.main(["generate", "--config", cfg, "--count", "5", "--out", str(out), "--checkpoint", str(ck)])
    assert code == cli.EXIT_TRAINING
    meta = json.loads((tmp_path / "u.csv.meta.json").read_text())
    assert meta["generation"]["attempts"] == 50 and not meta["generation"]["complete"]


def test_audit_identity(run, tmp_path, prep):
    _, cfg = run
    syn = tmp_path / "copy.csv"
    syn.write_text(cli._csv_text(prep.train))
    report = tmp_path / "audit.json"
    assert cli.main(["audit", "--config", cfg, "--synthetic", str(syn), "--out", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert doc["mean_jsd"] == 0 and doc["mean_ks"] == 0 and doc["mean_hellinger"] == 0
    assert doc["faith"]["integ"] == 0 and doc["faith"]["fact"] == 1 and doc["faith"]["track"] == 1
    f = doc["faith"]
    assert f["composite"] == pytest.approx(sum(f["weights"][k] * f[k] for k in ("fact", "align", "integ", "track")))
    assert any("automatic" in n for n in doc["notes"])
    assert doc["meta"]["config_hash"]


def test_audit_schema_mismatch(run, tmp_path, prep, capsys):
    _, cfg = run
    syn = tmp_path / "bad.csv"
    text = cli._csv_text(prep.train).splitlines()
    header = text[0].split(",")
    syn.write_text("\n".join(",".join(r.split(",")[:-1]) for r in [",".join(header)] + text[1:]) + "\n")
    assert cli.main(["audit", "--config", cfg, "--synthetic", str(syn)]) == cli.EXIT_DATA
    assert header[-1] in capsys.readouterr().err


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert cli.main(["discover", "--config", str(bad)]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as err:
        cli.main(["frobnicate"])
    assert err.value.code == cli.EXIT_CONFIG
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "empty")
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_DATA
    missing = write_config(tmp_path / "m.json", tmp_path / "o", paths={"input": str(tmp_path / "none.csv")})
    assert cli.main(["discover", "--config", missing]) == cli.EXIT_DATA


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "ignored")
    assert cli.main(["discover", "--config", cfg]) == 0
    assert (tmp_path / "env" / "pcrit.json").exists() and not (tmp_path / "ignored").exists()


def test_pipeline_composes(run):
    d, cfg = run
    assert cli.main(["train", "--config", cfg]) == 0
    assert cli.main(["generate", "--config", cfg]) == 0
    assert cli.main(["evaluate", "--config", cfg]) == 0
    doc = json.loads((d / "out" / "audit.json").read_text())
    assert doc["n_synthetic"] == 20 and 0 <= doc["tstr"]["mean"] <= 1
    assert (d / "out" / "audit_features.csv").exists()
