import json

import numpy as np
import pytest

from fineosr import cli, synthdata, trainer
from fineosr.cli import main

from conftest import TINY_TRAIN

GEN = ["gen-data", "--classes", "8", "--known", "4", "--attrs", "8", "--dim", "12", "--per-class", "16",
       "--test-per-class", "8", "--groups", "2", "--quiet"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    TINY_TRAIN.save(cfg)
    assert main(GEN + ["--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(cfg), "--out", str(root / "run"),
                 "--quiet"]) == 0
    return root


def _sha(p):
    return cli.sha256_file(p)


def test_gen_data_files_and_determinism(workspace, tmp_path):
    files = sorted(p.name for p in (workspace / "data").iterdir())
    assert files == sorted([f"{n}.csv" for n in synthdata.SPLIT_FILES] + ["dataset.json", "manifest.json"])
    assert main(GEN + ["--seed", "3", "--out", str(tmp_path / "again")]) == 0
    for n in synthdata.SPLIT_FILES:
        assert _sha(workspace / "data" / f"{n}.csv") == _sha(tmp_path / "again" / f"{n}.csv")
    man = json.loads((workspace / "data" / "manifest.json").read_text())
    assert man["files"]["train.csv"] == _sha(workspace / "data" / "train.csv")
    assert man["version"].startswith("fineosr ")


def test_gen_data_bad_flags(tmp_path, capsys):
    assert main(["gen-data", "--known", "12", "--classes", "8", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--classes", "nope"]) == 2
    assert main([]) == 2


def test_train_outputs(workspace):
    run = workspace / "run"
    log = (run / "train_log.csv").read_text().splitlines()
    assert len(log) == TINY_TRAIN.T + 1
    man = json.loads((run / "manifest.json").read_text())
    assert set(man["files"]) == {"checkpoint.bin", "train_log.csv", "config.json"}
    assert man["config_sha256"] == _sha(run / "config.json")
    ck = trainer.load_checkpoint(run / "checkpoint.bin")
    assert ck.epoch == TINY_TRAIN.T and "final_acc" in ck.meta


def test_train_zero_epochs(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
                 "--epochs", "0", "--out", str(tmp_path), "--quiet"]) == 0
    ck = trainer.load_checkpoint(tmp_path / "checkpoint.bin")
    assert ck.epoch == 0


def test_train_flags_override_config(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
                 "--epochs", "1", "--lambda2", "0.25", "--sgld_steps", "3", "--out", str(tmp_path), "--quiet"]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["T"] == 1 and cfg["lambda2"] == 0.25 and cfg["sgld"]["steps"] == 3


def test_train_resume_matches(workspace, tmp_path):
    base = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"), "--quiet"]
    assert main(base + ["--out", str(tmp_path / "a"), "--stop-after", "2"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--resume", str(tmp_path / "a" / "checkpoint.bin")]) == 0
    assert _sha(tmp_path / "b" / "checkpoint.bin") == _sha(workspace / "run" / "checkpoint.bin")


def test_train_errors(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--data", str(workspace / "data"), "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text('{"T": 1, "mystery": 2}')
    assert main(["train", "--data", str(workspace / "data"), "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 2


def test_train_divergence_exit_code(workspace, tmp_path, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
                 "--sgld_step_size", "30", "--sgld_steps", "200", "--out", str(tmp_path)])
    assert code == 3
    assert (tmp_path / "checkpoint.partial.bin").exists()
    assert "checkpoint.partial.bin" in capsys.readouterr().err


def test_eval_outputs(workspace, tmp_path):
    assert main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--data",
                 str(workspace / "data"), "--out", str(tmp_path), "--quiet"]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert sum("auroc" in k for s in m["splits"].values() for k in s.values()) == 9
    ck = trainer.load_checkpoint(workspace / "run" / "checkpoint.bin")
    assert m["acc"] == ck.meta["final_acc"]
    for kind in ("free_energy", "max_joint_energy", "msp"):
        assert (tmp_path / f"hist_{kind}.svg").read_text().startswith("<svg")


def test_eval_errors(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoint.bin")
    d = tmp_path / "partial"
    synthdata.save_openset_data(synthdata.load_openset_data(workspace / "data"), d)
    (d / "medium.csv").unlink()
    assert main(["eval", "--checkpoint", ck, "--data", str(d), "--out", str(tmp_path / "o")]) == 2
    other = tmp_path / "wide"
    assert main(["gen-data", "--dim", "20", "--quiet", "--out", str(other)]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(other), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--data", str(d),
                 "--out", str(tmp_path / "o")]) == 2


def test_sample_modes(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoint.bin")
    assert main(["sample", "--checkpoint", ck, "--mode", "random", "--n", "100", "--out", str(tmp_path / "r"),
                 "--quiet"]) == 0
    x = synthdata.load_features_csv(tmp_path / "r" / "samples.csv")
    assert x.shape == (100, 12)
    assert main(["sample", "--checkpoint", ck, "--mode", "posterior", "--out", str(tmp_path / "p")]) == 2
    assert main(["sample", "--checkpoint", ck, "--mode", "posterior", "--n", "30", "--input",
                 str(workspace / "data" / "known_test.csv"), "--out", str(tmp_path / "p"), "--quiet"]) == 0
    assert main(["sample", "--checkpoint", ck, "--mode", "prior", "--n", "50", "--ref",
                 str(workspace / "data" / "train.csv"), "--out", str(tmp_path / "q"), "--quiet"]) == 0
    ffd = json.loads((tmp_path / "q" / "ffd.json").read_text())
    assert ffd["mode"] == "prior" and np.isfinite(ffd["ffd"])
    assert main(["sample", "--checkpoint", ck, "--mode", "sideways"]) == 2


def test_sample_deterministic(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoint.bin")
    for name in ("a", "b"):
        assert main(["sample", "--checkpoint", ck, "--mode", "prior", "--n", "20", "--seed", "4",
                     "--out", str(tmp_path / name), "--quiet"]) == 0
    assert _sha(tmp_path / "a" / "samples.csv") == _sha(tmp_path / "b" / "samples.csv")


def test_ablate_schema(tmp_path, monkeypatch):
    real = synthdata.DataConfig
    monkeypatch.setattr(synthdata, "DataConfig", lambda: real(
        K_total=8, n_known=4, M=8, D=12, n_per_class=16, n_test_per_class=8, groups=2))
    cfg = tmp_path / "tiny.json"
    TINY_TRAIN.save(cfg)
    assert main(["ablate", "--seeds", "1", "--config", str(cfg), "--epochs", "2", "--out", str(tmp_path / "ab"),
                 "--quiet"]) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 3
    rows = [ln.split(",")[:2] for ln in lines[1:]]
    assert {r[0] for r in rows} == {"full", "no_rafa", "no_aib", "no_uvos"}
    assert {r[1] for r in rows} == {"easy", "medium", "hard"}
    assert len((tmp_path / "ab" / "ablation.txt").read_text().splitlines()) == 13


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "fineosr", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("fineosr ")
