import json

import numpy as np
import pytest
import yaml

from mixpgd import config as cfgmod
from mixpgd.cli import main
from mixpgd.data import load_manifest

TINY_RUN = {
    "data": {"toy_size": 6, "eval_toy_size": 3, "mel_bins": 16},
    "model": {"cnn_channels": 4, "n_rescnn_blocks": 1, "n_birnn_layers": 1, "rnn_hidden": 16},
    "train": {"epochs": 1, "batch_size": 3, "epsilon": 0.1, "inner_iters": 2, "eta2": 5e-3},
    "attack": {"family": "pgd", "epsilon": 0.1, "n_steps": 2},
    "attacks": [{"family": "fgsm", "epsilon": 0.1}, {"family": "pgd", "epsilon": 0.1, "n_steps": 2}],
    "sinkhorn": {"max_iters": 30, "tol": 1e-4},
    "eval": {"batch_size": 3},
}


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY_RUN))
    return path


# -- config -----------------------------------------------------------------

def test_unknown_key_is_named():
    with pytest.raises(cfgmod.ConfigError, match="train.epochz"):
        cfgmod.from_dict({"train": {"epochz": 3}})
    with pytest.raises(cfgmod.ConfigError, match="trainer"):
        cfgmod.from_dict({"trainer": {}})


def test_overrides_and_hash(run_config):
    a = cfgmod.load(run_config)
    b = cfgmod.load(run_config, ["train.epochs=7", "sinkhorn.reg=0.1"])
    assert b.train.epochs == 7 and b.sinkhorn.reg == 0.1
    assert a.config_hash != b.config_hash
    assert cfgmod.load(run_config).config_hash == a.config_hash
    assert a.model.n_mels == 16


def test_mel_mismatch_rejected():
    with pytest.raises(cfgmod.ConfigError, match="n_mels"):
        cfgmod.from_dict({"data": {"mel_bins": 16}, "model": {"n_mels": 32}})


def test_dump_roundtrip(tmp_path, run_config):
    run = cfgmod.load(run_config)
    run.dump(tmp_path / "c.json")
    again = cfgmod.load(tmp_path / "c.json")
    assert again.config_hash == run.config_hash


def test_desk_profile_is_valid():
    run = cfgmod.desk_config(3)
    assert run.train.seed == 3 and run.model.n_mels == run.data.mel_bins


# -- commands ---------------------------------------------------------------

def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert main(["train"]) == 2
    assert main(["frobnicate"]) == 2


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "train.epochz" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_synth_data_writes_loadable_manifest(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path / "toy"), "--seed", "4", "--n", "3"]) == 0
    examples, rejects = load_manifest(tmp_path / "toy" / "manifest.csv")
    assert len(examples) == 3 and rejects == []


def test_run_directory_is_append_only(tmp_path):
    out = tmp_path / "toy"
    assert main(["synth-data", "--out", str(out), "--n", "1"]) == 0
    assert main(["synth-data", "--out", str(out), "--n", "1"]) == 2
    assert main(["synth-data", "--out", str(out), "--n", "1", "--force"]) == 0


def test_train_attack_evaluate(tmp_path, run_config, capsys):
    run_dir = tmp_path / "std"
    assert main(["train", "--config", str(run_config), "--regime", "standard",
                 "--out", str(run_dir)]) == 0
    summary = json.loads((run_dir / "run.json").read_text())
    assert {"config_hash", "seed", "code_version", "parameter_hash"} <= set(summary)
    ckpt = run_dir / "last.ckpt"
    assert ckpt.exists() and (run_dir / "train_log.jsonl").exists()

    assert main(["attack", "--config", str(run_config), "--checkpoint", str(ckpt),
                 "--corpus", "toy:5:3", "--out", str(tmp_path / "att")]) == 0
    arrays = np.load(tmp_path / "att" / "perturbations.npz")
    assert np.abs(arrays["delta_0"]).max() <= 0.1 + 1e-9

    ev_dir = tmp_path / "ev"
    assert main(["evaluate", "--config", str(run_config), "--checkpoint", str(ckpt),
                 "--out", str(ev_dir)]) == 0
    out = capsys.readouterr().out
    assert "config_hash=" in out
    report = json.loads((ev_dir / "report.json").read_text())
    assert [r["attack_name"] for r in report["rows"]] == ["clean", "FGSM", "PGD2"]
    assert (ev_dir / "report.csv").read_text().startswith("model_id,regime,attack,epsilon,steps,cer,wer")

    assert main(["evaluate", "--config", str(run_config), "--checkpoint", str(ckpt),
                 "--surrogate", str(ckpt), "--out", str(tmp_path / "tr")]) == 0


def test_evaluate_missing_checkpoint(tmp_path, run_config):
    assert main(["evaluate", "--config", str(run_config), "--checkpoint",
                 str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "ev")]) == 2


def test_repro_table3_prints_reference_rows(tmp_path, run_config, capsys):
    assert main(["repro", "--table", "3", "--config", str(run_config),
                 "--set", "attacks=[]", "--out", str(tmp_path / "t3")]) == 0
    out = capsys.readouterr().out
    assert "published reference" in out
    assert "35.07" in out and "39.59" in out
    assert "config_hash=" in out
