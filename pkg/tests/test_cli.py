import json

import numpy as np
import pytest

from umdr.cli import main
from umdr.tensor_io import read_tensor

TINY = {"dsn.stem_channels": 16, "dsn.stages": 2, "dsn.widths": [16, 16], "dsn.d_rcm": 8, "dsn.frames": 8,
        "dtn.n_branches": 2, "dtn.blocks": 1, "dtn.heads": 2, "dtn.num_classes": 4,
        "epochs": 2, "batch_size": 4, "warmup_epochs": 1, "fuse_epochs": 2}


@pytest.fixture(scope="module")
def cli_run(small_dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    for mod in ("rgb", "depth"):
        rc = main(["train", "--config", str(cfg), "--dataset", small_dataset, "--modality", mod,
                   "--seed", "1", "--out", str(d / mod)])
        assert rc == 0
    return d, small_dataset


def test_synth_data(tmp_path, capsys):
    rc = main(["--seed", "2", "synth-data", "--classes", "3", "--n-per-class", "2", "--frames", "8",
               "--size", "16", "--out", str(tmp_path / "ds")])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["train_samples"] == 6 and report["seed"] == 2
    assert (tmp_path / "ds" / "manifest.json").exists()


def test_train_writes_checkpoint(cli_run):
    d, _ = cli_run
    assert (d / "rgb" / "meta.json").exists()
    header = (d / "rgb" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,tau,ce,branch_ce,distill,train_top1,val_top1"
    meta = json.loads((d / "rgb" / "meta.json").read_text())
    assert meta["config"]["seed"] == 1 and meta["config"]["dtn.num_classes"] == 4
    assert any(k.startswith("dsn.stage0.") for k in meta["shapes"])
    assert any(k.startswith("dtn.branch0.block0.") for k in meta["shapes"])
    int(meta["rng_state"], 16)  # hex blob


def test_eval(cli_run, capsys):
    d, ds = cli_run
    assert main(["eval", "--ckpt", str(d / "rgb"), "--dataset", ds, "--split", "train"]) == 0
    acc = json.loads(capsys.readouterr().out)["top1"]
    assert 0.0 <= acc <= 1.0


def test_resume_via_cli(cli_run, tmp_path):
    d, ds = cli_run
    cfg = d / "tiny.json"
    common = ["train", "--config", str(cfg), "--dataset", ds, "--modality", "rgb", "--seed", "1"]
    assert main(common + ["--stop-after", "1", "--out", str(tmp_path / "half")]) == 0
    assert main(["train", "--resume", str(tmp_path / "half"), "--out", str(tmp_path / "full")]) == 0
    assert (tmp_path / "full" / "metrics.csv").read_text() == (d / "rgb" / "metrics.csv").read_text()


def test_augment(small_dataset, tmp_path):
    out = tmp_path / "mixed"
    rc = main(["augment", "--in", small_dataset, "--out", str(out), "--rho", "1.0", "--geometry",
               "continuous", "--batch-size", "4", "--seed", "3"])
    assert rc == 0
    labels = json.loads((out / "labels.json").read_text())
    assert len(labels) == 16
    for sid, rec in labels.items():
        assert rec["kind"] == "shufflemix" and rec["source"] != rec["partner"]
        assert abs(sum(rec["label"]) - 1) < 1e-6
        frames = read_tensor(out / sid / "rgb.umdt")
        assert frames.shape == (8, 3, 16, 16) and frames.min() >= 0 and frames.max() <= 1


@pytest.mark.parametrize("strategy", ["add", "mul"])
def test_fuse_baselines(cli_run, capsys, strategy):
    d, ds = cli_run
    assert main(["fuse", "--rgb-ckpt", str(d / "rgb"), "--depth-ckpt", str(d / "depth"),
                 "--strategy", strategy, "--dataset", ds]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["strategy"] == strategy and 0 <= rep["val_top1"] <= 1


def test_fuse_cfcer_and_similarity(cli_run, tmp_path, capsys):
    d, ds = cli_run
    fz = tmp_path / "fz"
    assert main(["fuse", "--rgb-ckpt", str(d / "rgb"), "--depth-ckpt", str(d / "depth"),
                 "--strategy", "cfcer", "--epochs", "2", "--out", str(fz)]) == 0
    capsys.readouterr()
    rep_path = tmp_path / "sim" / "report.json"
    assert main(["analyze-similarity", "--ckpt", str(fz), "--out", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    n = rep["n"]
    assert n == 8 and len(rep["class_token"]["cosines"]) == n
    assert np.array(rep["pca"]["complementary"]).shape == (2 * n, 2)
    rows = (tmp_path / "sim" / "report.csv").read_text().splitlines()
    assert rows[0] == "index,label,cos_class_token,cos_complementary" and len(rows) == n + 1


def test_gradcheck_cli(tmp_path, capsys):
    assert main(["gradcheck", "--module", "quadratic", "--out", str(tmp_path / "g.json")]) == 0
    assert "PASS" in capsys.readouterr().out
    assert json.loads((tmp_path / "g.json").read_text())[0]["passed"]


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing")]) == 2
    assert main(["gradcheck", "--module", "nope"]) == 2
    with pytest.raises(SystemExit):
        main(["train", "--set", "novalue"])
