import json

import pytest

from marlframes.checkpoint import save_checkpoint
from marlframes.cli import main
from marlframes.config import ExperimentConfig
from marlframes.sampler import ModelDims, ModelParameters

SPEC = """num_classes = 3
F = 10
D = 4
salient_fraction = 0.3
confuser_fraction = 0.2
noise_sigma = 0.2
videos_per_class = 3
val_videos_per_class = 2
seed = 5
"""

CONFIG = """F = 10
N_train = 2
N_test = 2
T_max = 3
d_o = 6
H = 8
epochs = 2
lr = 0.001
train_path = data/train
val_path = data/val
out_dir = run
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "spec.txt").write_text(SPEC)
    (tmp_path / "exp.cfg").write_text(CONFIG)
    assert main(["generate-data", str(tmp_path / "spec.txt"), str(tmp_path / "data")]) == 0
    return tmp_path


def test_generate_data_summary(workdir, capsys):
    main(["generate-data", str(workdir / "spec.txt"), str(workdir / "again")])
    out = capsys.readouterr().out
    assert "train: 9 sequences" in out and "val: 6 sequences" in out
    for f in sorted((workdir / "data" / "train").iterdir()):
        assert f.read_bytes() == (workdir / "again" / "train" / f.name).read_bytes()


def test_generate_data_unknown_key(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("F = 10\nwidth = 3\n")
    assert main(["generate-data", str(tmp_path / "bad.txt"), str(tmp_path / "o")]) == 1
    assert "width" in capsys.readouterr().err


def test_generate_data_missing_file(tmp_path):
    assert main(["generate-data", str(tmp_path / "nope.txt"), str(tmp_path / "o")]) == 2


def test_train_evaluate_compare_trace(workdir, capsys):
    assert main(["train", str(workdir / "exp.cfg")]) == 0
    run = workdir / "run"
    assert (run / "best.mckp").exists() and (run / "last.mckp").exists()
    report = (run / "report.csv").read_text().splitlines()
    assert report[0].startswith("epoch,loss") and len(report) == 3

    ckpt, val = str(run / "best.mckp"), str(workdir / "data" / "val")
    capsys.readouterr()
    assert main(["evaluate", ckpt, val, "--N", "4", "--predictions", str(workdir / "p.csv")]) == 0
    assert capsys.readouterr().out.startswith("N=4 top1=")
    assert len((workdir / "p.csv").read_text().splitlines()) == 7

    assert main(["compare", ckpt, val, "--n-sweep", "1,3", "--out", str(workdir / "cmp.csv")]) == 0
    rows = (workdir / "cmp.csv").read_text().splitlines()
    assert rows[0] == "strategy,K,top1,mAP,frames_observed,seconds"
    assert [r.split(",")[0] for r in rows[1:]] == ["R2", "U2", "All", "MARL2", "MARL1", "MARL3", "Oracle2"]

    assert main(["trace", ckpt, val, str(workdir / "t.jsonl"), "--limit", "2"]) == 0
    recs = [json.loads(l) for l in (workdir / "t.jsonl").read_text().splitlines()]
    assert len(recs) == 2
    assert set(recs[0]) == {"id", "label", "t_stop", "positions", "actions", "scores"}
    assert len(recs[0]["positions"]) == recs[0]["t_stop"]


def test_train_is_deterministic(workdir):
    assert main(["train", str(workdir / "exp.cfg"), "--out", str(workdir / "a")]) == 0
    assert main(["train", str(workdir / "exp.cfg"), "--out", str(workdir / "b")]) == 0
    for name in ("best.mckp", "last.mckp"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_seed_flag_changes_training(workdir):
    assert main(["--seed", "1", "train", str(workdir / "exp.cfg"), "--out", str(workdir / "a")]) == 0
    assert main(["--seed", "2", "train", str(workdir / "exp.cfg"), "--out", str(workdir / "b")]) == 0
    assert (workdir / "a" / "best.mckp").read_bytes() != (workdir / "b" / "best.mckp").read_bytes()


def test_trace_stop_at_first_step(workdir):
    dims = ModelDims(D=4, d_o=6, H=8, C=3, M=1)
    params = ModelParameters.init(dims, 0)
    params.values["policy.b"][:] = [[0.0, 1e6, 0.0]]
    save_checkpoint(workdir / "stay.mckp", params, ExperimentConfig(F=10, N_test=3, d_o=6, H=8))
    assert main(["trace", str(workdir / "stay.mckp"), str(workdir / "data" / "val"), str(workdir / "t.jsonl")]) == 0
    for line in (workdir / "t.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["t_stop"] == 1
        assert len(rec["positions"]) == 1 and len(rec["positions"][0]) == 3
        assert rec["actions"] == [["Stay", "Stay", "Stay"]]


def test_bad_checkpoint_exit_code(workdir, capsys):
    bad = workdir / "bad.mckp"
    bad.write_bytes(b"XXXX" + b"\0" * 40)
    assert main(["evaluate", str(bad), str(workdir / "data" / "val")]) == 2
    assert "magic" in capsys.readouterr().err


def test_unknown_config_key(workdir):
    (workdir / "bad.cfg").write_text("F = 10\ncolour = red\n")
    assert main(["train", str(workdir / "bad.cfg")]) == 1


def test_env_override_in_train(workdir, monkeypatch):
    monkeypatch.setenv("MFS_EPOCHS", "1")
    assert main(["train", str(workdir / "exp.cfg"), "--out", str(workdir / "e")]) == 0
    assert len((workdir / "e" / "report.csv").read_text().splitlines()) == 2


def test_gradcheck_command(capsys):
    assert main(["--threads", "1", "gradcheck"]) == 0
    assert capsys.readouterr().out.startswith("PASS, max rel err < 0.0001")
