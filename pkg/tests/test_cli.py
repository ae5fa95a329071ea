import json
import os

import numpy as np
import pytest

from mlwave import cli
from mlwave import io as mio
from mlwave.errors import NumericalError
from mlwave.model import load_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small synthetic population, a trained model and one fit, produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["synth", "--out-dir", str(data), "--rows", "17", "--cols", "17", "--d2", "4", "--d3", "3",
                     "--frames", "3", "--seed", "2", "-q"]) == 0
    model = root / "model.mwm"
    assert cli.main(["train", "--input", str(data / "manifest.txt"), "--m2", "2", "--m3", "2",
                     "--landmark-indices", str(data / "landmark_indices.txt"), "--out", str(model), "-q"]) == 0
    return root, data, model


def fit_args(data, model, out, *extra):
    return ["fit", "--model", str(model), "--scan", str(data / "heldout00_scan.ply"),
            "--landmarks", str(data / "heldout00_landmarks.txt"), "--out", str(out),
            "--surface-passes", "1", "--rho-s", "1", "-q", *extra]


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    out = capsys.readouterr().out
    assert "usage: mlwave" in out
    for command in cli.COMMANDS:
        assert command in out


def test_missing_required_flag_is_a_usage_error(capsys):
    assert cli.main(["fit", "--scan", "s.ply", "--out", "o.obj"]) == 1
    err = capsys.readouterr()
    assert "--model" in err.err and err.out == ""


def test_unknown_flag_and_command_are_usage_errors(capsys):
    assert cli.main(["fit", "--model", "m", "--scan", "s", "--out", "o", "--bogus"]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main([]) == 1
    assert capsys.readouterr().out == ""


def test_verbosity_flags_are_mutually_exclusive(capsys):
    assert cli.main(["transform", "--input", "a.obj", "--out", "-", "-v", "-q"]) == 1
    assert "not allowed" in capsys.readouterr().err


def test_synth_writes_a_complete_population(workspace):
    _, data, _ = workspace
    ids, exprs, table = mio.read_training_manifest(data / "manifest.txt")
    assert len(ids) == 4 and len(exprs) == 3 and all(p.exists() for p in table.values())
    spec = json.loads((data / "population.json").read_text())
    assert spec["rows"] == 17 and spec["seed"] == 2
    assert len(mio.read_frame_manifest(data / "frames.txt")) == 3
    scan = mio.read_scan(data / "heldout00_scan.ply", data / "heldout00_landmarks.txt")
    assert len(scan.landmarks) == len(mio.read_indices(data / "landmark_indices.txt"))


def test_train_output_is_independent_of_threads(workspace, tmp_path):
    _, data, model = workspace
    other = tmp_path / "m4.mwm"
    assert cli.main(["train", "--input", str(data / "manifest.txt"), "--m2", "2", "--m3", "2",
                     "--landmark-indices", str(data / "landmark_indices.txt"), "--out", str(other),
                     "--threads", "3", "-q"]) == 0
    assert other.read_bytes() == model.read_bytes()
    assert load_model(model).m2 == 2


def test_fit_and_eval(workspace, tmp_path):
    _, data, model = workspace
    out, report = tmp_path / "fit.obj", tmp_path / "fit.csv"
    assert cli.main(fit_args(data, model, out, "--report", str(report))) == 0
    fitted = mio.read_obj(out)
    assert (fitted.rows, fitted.cols) == (17, 17)
    text = report.read_text()
    config = json.loads(text.splitlines()[1].removeprefix("# config: "))
    assert config["rho_S"] == 1.0 and config["surface_passes"] == 1 and config["tau"] == 10.0
    assert "summary,median_mm," in text and "fit,status,ok" in text
    mask = tmp_path / "mask.txt"
    mio.write_indices([0, 1, 2], mask)
    ev = tmp_path / "eval.csv"
    assert cli.main(["eval", "--fitted", str(out), "--scan", str(data / "heldout00_scan.ply"),
                     "--mask", str(mask), "--out", str(ev)]) == 0
    assert "summary,count,286" in ev.read_text()


def test_fit_is_deterministic(workspace, tmp_path):
    _, data, model = workspace
    a, b = tmp_path / "a.obj", tmp_path / "b.obj"
    assert cli.main(fit_args(data, model, a, "--report", str(tmp_path / "a.csv"))) == 0
    assert cli.main(fit_args(data, model, b, "--report", str(tmp_path / "b.csv"))) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rho_S": 0.0, "tau": 5.0, "optimizer": {"max_iters": 7}}))
    args = cli.build_parser().parse_args(["fit", "--model", "m", "--scan", "s", "--out", "o",
                                          "--config", str(cfg), "--rho-s", "100"])
    c = cli.fit_config(args)
    assert c.rho_S == 100.0 and c.tau == 5.0 and c.optimizer.max_iters == 7 and c.rho_L == 1.0
    assert c.smoothing_boundary == "truncated"
    args = cli.build_parser().parse_args(["fit", "--model", "m", "--scan", "s", "--out", "o",
                                          "--smoothing-boundary", "reflect"])
    assert cli.fit_config(args).smoothing_boundary == "reflect"


def test_bad_config_is_a_data_error(workspace, tmp_path, capsys):
    _, data, model = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rho_x": 1.0}))
    assert cli.main(fit_args(data, model, tmp_path / "o.obj", "--config", str(cfg))) == 2
    assert "unknown fit settings" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert cli.main(fit_args(data, model, tmp_path / "o.obj", "--config", str(cfg))) == 2
    assert not (tmp_path / "o.obj").exists()


def test_data_errors_exit_two(workspace, tmp_path, capsys):
    _, data, model = workspace
    broken = tmp_path / "broken.mwm"
    broken.write_bytes(model.read_bytes()[:-20])
    assert cli.main(fit_args(data, broken, tmp_path / "o.obj")) == 2
    assert cli.main(fit_args(data, tmp_path / "absent.mwm", tmp_path / "o.obj")) == 2
    mask = tmp_path / "mask.txt"
    mio.write_indices([289], mask)
    assert cli.main(["eval", "--fitted", str(data / "heldout00_truth.obj"), "--scan",
                     str(data / "heldout00_scan.ply"), "--mask", str(mask), "--out", "-"]) == 2
    err = capsys.readouterr()
    assert err.out == "" and "data error" in err.err


def test_numerical_failures_exit_three(monkeypatch, capsys):
    def fail(args):
        raise NumericalError("diverged")

    monkeypatch.setitem(cli.COMMANDS, "transform", fail)
    assert cli.main(["transform", "--input", "a.obj", "--out", "-"]) == 3
    assert "numerical failure: diverged" in capsys.readouterr().err


def test_transform_to_standard_output(workspace, capsys):
    _, data, _ = workspace
    assert cli.main(["transform", "--input", str(data / "heldout00_truth.obj"), "--out", "-"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "k,level,kind,sx,sy,sz"
    assert len(lines) == 290
    assert lines[1].startswith("0,0,scaling,")


def test_track_writes_frames_and_summary(workspace, tmp_path):
    _, data, model = workspace
    out = tmp_path / "trk"
    assert cli.main(["track", "--model", str(model), "--frames", str(data / "frames.txt"), "--out-dir", str(out),
                     "--surface-passes", "1", "--rho-s", "1", "-q"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["frame_000.obj", "frame_001.obj", "frame_002.obj", "track.csv"]
    rows = (out / "track.csv").read_text().splitlines()
    assert rows[0] == "# mlwave track" and rows[2].startswith("frame,obj,energy,mean_distance_mm")
    assert len(rows) == 6
    assert all(np.isfinite(float(r.split(",")[3])) for r in rows[3:])


def test_commands_write_only_named_paths(workspace, tmp_path, monkeypatch):
    _, data, model = workspace
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    out = tmp_path / "only.obj"
    assert cli.main(fit_args(data, model, out)) == 0
    assert os.listdir(work) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cwd", "only.obj"]
