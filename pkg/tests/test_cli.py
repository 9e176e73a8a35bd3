import filecmp

import numpy as np
import pytest

from handdiff import diffusion as dif
from handdiff.cli import main

TINY = ["--image_size", "16", "--n_points", "32", "--d2d", "8", "--d3d", "8", "--dc", "16",
        "--dpe", "8", "--conv1", "4", "--conv2", "8", "--k3", "4", "--k2", "4", "--sa_k", "4",
        "--T", "20", "--batch", "4", "--epochs", "1", "--timesteps", "3", "--hypotheses", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "6", "--seed", "7", "--out", str(d / "data"), "--n_points", "32"]) == 0
    assert main(["train", "--data", str(d / "data"), "--seed", "1", "--out", str(d / "model"), *TINY]) == 0
    return d


def test_synth_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--count", "10", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == 12


def test_unknown_key_exits_2(tmp_path, capsys):
    assert main(["synth", "--count", "1", "--seed", "1", "--out", str(tmp_path), "--bogus", "3"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_unknown_key_in_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("d2d = 8\nwidth = 3\n")
    assert main(["synth", "--count", "1", "--seed", "1", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2
    assert "width" in capsys.readouterr().err


def test_precondition_failure_exits_1(tmp_path, capsys):
    assert main(["synth", "--count", "1", "--seed", "1", "--out", str(tmp_path),
                 "--use_lc", "false", "--use_kc", "true"]) == 1
    assert "KC requires LC" in capsys.readouterr().err


def test_missing_seed_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m")])
    assert info.value.code == 2


def test_missing_dataset_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--seed", "0", "--out", str(tmp_path / "m")]) == 1


def test_schedule_dump(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["schedule-dump", "--kind", "cosine", "--T", "500", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 500
    col = lines[0].split(",").index("alpha_bar")
    ab = np.array([float(r[col]) for r in rows])
    assert np.all(np.diff(ab) < 0)
    np.testing.assert_allclose(ab, dif.build_schedule("cosine", 500).alpha_bar[1:], rtol=1e-15)


def test_eval_and_infer_outputs(workdir):
    d = workdir
    args = ["--model", str(d / "model"), "--data", str(d / "data")]
    assert main(["eval", *args, "--out", str(d / "m1.csv"), "--predictions", str(d / "p1.csv")]) == 0
    assert main(["eval", *args, "--out", str(d / "m2.csv")]) == 0
    assert (d / "m1.csv").read_bytes() == (d / "m2.csv").read_bytes()
    assert main(["infer", *args, "--out", str(d / "p2.csv")]) == 0
    assert (d / "p1.csv").read_bytes() == (d / "p2.csv").read_bytes()
    assert (d / "p1.csv").read_text().splitlines()[0] == "frame,joint,x_mm,y_mm,z_mm"


def test_eval_inference_overrides(workdir):
    d = workdir
    args = ["eval", "--model", str(d / "model"), "--data", str(d / "data")]
    assert main([*args, "--out", str(d / "a.csv"), "--timesteps", "10", "--hypotheses", "10"]) == 0
    assert main([*args, "--out", str(d / "b.csv"), "--dc", "32"]) == 1


def test_sweep_command(workdir):
    d = workdir
    out = d / "sweep.csv"
    assert main(["sweep", "--model", str(d / "model"), "--data", str(d / "data"),
                 "--axis", "hypotheses", "--values", "1,2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "axis,value,mean_error_mm" and [l.split(",")[1] for l in lines[1:]] == ["1", "2"]
    assert main(["sweep", "--model", str(d / "model"), "--data", str(d / "data"),
                 "--axis", "hypotheses", "--values", "", "--out", str(out)]) == 2


def test_config_round_trip(workdir, tmp_path):
    # retraining from the dumped effective config reproduces the model bytes
    d = workdir
    cfg = d / "model" / "config.txt"
    assert main(["train", "--data", str(d / "data"), "--seed", "1", "--out", str(tmp_path / "m"),
                 "--config", str(cfg)]) == 0
    assert (tmp_path / "m" / "params.ckpt").read_bytes() == (d / "model" / "params.ckpt").read_bytes()
    assert (tmp_path / "m" / "train_log.csv").read_bytes() == (d / "model" / "train_log.csv").read_bytes()
