import json
from pathlib import Path

import numpy as np
import pytest

from hypermix import cli
from hypermix import config as cfgmod
from hypermix.errors import ConfigError

TINY_CFG = """
# miniature run, fast enough for round-trip tests
data.input_dim = 6
data.n_base = 10
data.n_val = 6
data.n_novel = 8
data.samples_per_class = 20
data.center_scale = 3.0
model.d_feat = 8
model.feat_hidden = 16,16
model.hyper_hidden = 32,32
pretrain.epochs = 4
train.epochs = 2
train.batches_per_epoch = 3
train.episodes_per_batch = 2
train.q_ind = 6
task.ways = 4
task.shots = 3
eval.episodes = 6
eval.q_ind = 5
eval.q_ood = 5
"""


@pytest.fixture()
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


# ---------------------------------------------------------------------------
# config parsing


def test_defaults_cover_schema():
    cfg = cfgmod.default_config()
    assert set(cfg) == set(cfgmod.SCHEMA)
    assert cfg["task.ways"] == 5 and cfg["mix.a_om"] == 20.0


def test_parse_file_with_comments(tiny_cfg_file):
    cfg = cfgmod.load_config(tiny_cfg_file)
    assert cfg["data.n_base"] == 10
    assert cfg["model.feat_hidden"] == [16, 16]
    assert cfg["train.method"] == "plain"  # untouched default


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("data.bogus = 3\n")
    with pytest.raises(ConfigError, match="bogus"):
        cfgmod.load_config(str(path))


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("data.n_base = many\n")
    with pytest.raises(ConfigError, match="n_base"):
        cfgmod.load_config(str(path))


def test_missing_file_names_path():
    with pytest.raises(ConfigError, match="no/such/file.cfg"):
        cfgmod.load_config("no/such/file.cfg")


def test_config_hash_tracks_values():
    a, b = cfgmod.default_config(), cfgmod.default_config()
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    b["task.shots"] = 10
    assert cfgmod.config_hash(a) != cfgmod.config_hash(b)


def test_grid_parsing():
    axes = cli.parse_grid("mix.a_pm=0.1,1.0,2.0;mix.b_pm=5.0,10.0,20.0")
    assert axes == [("mix.a_pm", [0.1, 1.0, 2.0]), ("mix.b_pm", [5.0, 10.0, 20.0])]
    with pytest.raises(ConfigError):
        cli.parse_grid("nope=1")
    with pytest.raises(ConfigError):
        cli.parse_grid("model.feat_hidden=16")


def test_cell_seed_identity_at_zero():
    assert cli.derive_cell_seed(123, 0) == 123
    assert cli.derive_cell_seed(123, 1) != 123


# ---------------------------------------------------------------------------
# CLI round trips (miniature scale)


def run_cli(*argv):
    return cli.main(list(argv))


def test_missing_config_exits_2(tmp_path, capsys):
    rc = run_cli("pretrain", "--config", str(tmp_path / "absent.cfg"))
    assert rc == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_unknown_method_exits_2(tiny_cfg_file, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run_cli("pretrain", "--config", tiny_cfg_file, "--out", out) == 0
    rc = run_cli("metatrain", "--config", tiny_cfg_file, "--out", out,
                 "--method", "sgd")
    assert rc == 2
    assert "plain" in capsys.readouterr().err


def test_pipeline_round_trip(tiny_cfg_file, tmp_path):
    out = Path(tmp_path / "run")
    assert run_cli("pretrain", "--config", tiny_cfg_file, "--out", str(out), "--seed", "5") == 0
    assert (out / "extractor.ckpt").exists()
    manifest = json.loads((out / "manifest-pretrain.json").read_text())
    assert manifest["seed"] == 5 and "config_hash" in manifest

    assert run_cli("metatrain", "--config", tiny_cfg_file, "--out", str(out),
                   "--seed", "5", "--method", "hypermix") == 0
    loss_lines = (out / "train_loss.csv").read_text().strip().splitlines()
    assert loss_lines[1] == "epoch,loss"
    assert len(loss_lines) == 2 + 2  # stamp + header + one row per epoch

    assert run_cli("eval", "--config", tiny_cfg_file, "--out", str(out), "--seed", "5",
                   "--methods", "msp,protonet") == 0
    reports = json.loads((out / "reports.json").read_text())
    assert {r["method"] for r in reports} == {"msp", "protonet"}
    for r in reports:
        assert set(r) == {"method", "n_episodes", "seed", "ind_acc", "auroc", "fpr90", "config"}
        assert set(r["auroc"]) == {"mean", "hw"}
    rec_lines = (out / "records.csv").read_text().splitlines()
    assert rec_lines[1] == "episode,query,method,score,pred,truth"
    assert (out / "roc-msp.csv").exists() and (out / "roc.svg").exists()


def test_eval_noise_list_gives_report_per_level(tiny_cfg_file, tmp_path):
    out = Path(tmp_path / "run")
    assert run_cli("pretrain", "--config", tiny_cfg_file, "--out", str(out)) == 0
    assert run_cli("metatrain", "--config", tiny_cfg_file, "--out", str(out)) == 0
    assert run_cli("eval", "--config", tiny_cfg_file, "--out", str(out),
                   "--methods", "msp", "--noise", "0.0,0.2,0.4") == 0
    reports = json.loads((out / "reports.json").read_text())
    assert [r["config"]["noise_frac"] for r in reports] == [0.0, 0.2, 0.4]
    assert (out / "noise_curves.csv").exists()
    assert (out / "noise_acc.svg").exists() and (out / "noise_auroc.svg").exists()


def test_eval_empty_methods_exits_2(tiny_cfg_file, tmp_path, capsys):
    out = str(tmp_path / "run")
    run_cli("pretrain", "--config", tiny_cfg_file, "--out", out)
    run_cli("metatrain", "--config", tiny_cfg_file, "--out", out)
    assert run_cli("eval", "--config", tiny_cfg_file, "--out", out, "--methods", "") == 2


def test_eval_capacity_checks(tiny_cfg_file, tmp_path):
    out = str(tmp_path / "run")
    run_cli("pretrain", "--config", tiny_cfg_file, "--out", out)
    run_cli("metatrain", "--config", tiny_cfg_file, "--out", out)
    assert run_cli("eval", "--config", tiny_cfg_file, "--out", out,
                   "--methods", "msp", "--ways", "9") == 2
    assert run_cli("eval", "--config", tiny_cfg_file, "--out", out,
                   "--methods", "msp", "--shots", "21") == 2


def test_sweep_budget_refusal(tiny_cfg_file, tmp_path, capsys):
    cfg_text = TINY_CFG + "sweep.budget = 4\n"
    path = tmp_path / "budget.cfg"
    path.write_text(cfg_text)
    rc = run_cli("sweep", "--config", str(path), "--out", str(tmp_path / "sw"),
                 "--grid", "mix.a_pm=0.1,1.0,2.0;mix.b_pm=5.0,10.0,20.0")
    assert rc == 2
    assert "9" in capsys.readouterr().err


def test_sweep_singleton_matches_manual_pipeline(tiny_cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("HYPERMIX_THREADS", "1")
    out = Path(tmp_path / "sw")
    assert run_cli("sweep", "--config", tiny_cfg_file, "--out", str(out), "--seed", "4",
                   "--grid", "mix.a_pm=2.0", "--episodes", "5") == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[1] == "cell,seed,mix.a_pm,ind_acc,auroc,fpr90"
    row = lines[2].split(",")
    assert row[0] == "0" and row[1] == "4"  # cell 0 keeps the base seed

    # the same pipeline run by hand on the validation split agrees
    out2 = Path(tmp_path / "manual")
    assert run_cli("pretrain", "--config", tiny_cfg_file, "--out", str(out2), "--seed", "4") == 0
    assert run_cli("metatrain", "--config", tiny_cfg_file, "--out", str(out2), "--seed", "4") == 0
    cfg2 = tmp_path / "val.cfg"
    cfg2.write_text(TINY_CFG + "eval.split = val\n")
    assert run_cli("eval", "--config", str(cfg2), "--out", str(out2), "--seed", "4",
                   "--methods", "msp", "--episodes", "5",
                   "--extractor", str(out2 / "extractor.ckpt")) == 0
    report = json.loads((out2 / "reports.json").read_text())[0]
    assert float(row[3]) == report["ind_acc"]["mean"]
    assert float(row[4]) == report["auroc"]["mean"]


def test_diagnose_cov_output(tiny_cfg_file, tmp_path):
    out = Path(tmp_path / "run")
    run_cli("pretrain", "--config", tiny_cfg_file, "--out", str(out))
    cfg = tmp_path / "diag.cfg"
    cfg.write_text(TINY_CFG + "diag.shots = 2,30\n")
    assert run_cli("diagnose-cov", "--config", str(cfg), "--out", str(out)) == 0
    lines = (out / "cov_spectra.csv").read_text().splitlines()
    assert lines[1] == "shots,index,singular_value"
    shots = {int(l.split(",")[0]) for l in lines[2:]}
    assert shots == {2, 30}


def test_rerun_payloads_byte_identical(tiny_cfg_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = Path(tmp_path / name)
        assert run_cli("pretrain", "--config", tiny_cfg_file, "--out", str(out), "--seed", "9") == 0
        assert run_cli("metatrain", "--config", tiny_cfg_file, "--out", str(out), "--seed", "9") == 0
        assert run_cli("eval", "--config", tiny_cfg_file, "--out", str(out), "--seed", "9",
                       "--methods", "msp,dm") == 0
        outs.append(out)
    a_files = sorted(p.name for p in outs[0].iterdir() if not p.name.startswith("manifest"))
    b_files = sorted(p.name for p in outs[1].iterdir() if not p.name.startswith("manifest"))
    assert a_files == b_files
    for name in a_files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    # manifests differ only in the timestamp and their own output path
    for m in ("manifest-pretrain.json", "manifest-eval.json"):
        ma = json.loads((outs[0] / m).read_text())
        mb = json.loads((outs[1] / m).read_text())
        for d in (ma, mb):
            d.pop("timestamp")
            d["config"].pop("out")
        assert ma == mb
