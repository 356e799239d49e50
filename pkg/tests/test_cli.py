import json
import subprocess
import sys

import pytest

from w2lab.cli import run
from w2lab.model import Point2, Prediction, save_predictions, save_scene

from conftest import make_scene

SUBCOMMANDS = [["match"], ["eval"], ["decode"], ["gradcheck"], ["lab"], ["lab", "ambiguity"], ["lab", "ablation"]]


@pytest.fixture
def files(tmp_path):
    scene = make_scene([(0.2, 0.2), (0.8, 0.8)], [(0.25, 0.2)], scene_id="cli")
    preds = [Prediction(Point2(0.21, 0.2), 0.9, 0.8), Prediction(Point2(0.7, 0.8), 0.6, 0.5),
             Prediction(Point2(0.5, 0.5), 0.1, 0.1)]
    save_scene(scene, tmp_path / "scene.json")
    save_predictions(preds, tmp_path / "preds.json")
    return tmp_path


def test_top_level_help_via_entry_point():
    proc = subprocess.run([sys.executable, "-m", "w2lab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "match" in proc.stdout


@pytest.mark.parametrize("cmd", SUBCOMMANDS, ids=" ".join)
def test_every_subcommand_has_help(cmd, capsys):
    assert run(cmd + ["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_match_writes_assignment(files, capsys):
    assert run(["match", "--scene", str(files / "scene.json"), "--preds", str(files / "preds.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pairs"] == [[0, 0], [1, 1]]
    assert len(out["ambiguity_ratios"]) == 2


def test_match_output_is_byte_identical_across_runs(files):
    args = ["match", "--scene", str(files / "scene.json"), "--preds", str(files / "preds.json"), "--form", "hinge"]
    assert run(args + ["--out", str(files / "a.json")]) == 0
    assert run(args + ["--out", str(files / "b.json")]) == 0
    assert (files / "a.json").read_bytes() == (files / "b.json").read_bytes()


def test_match_input_errors_exit_2(files, capsys):
    (files / "bad.json").write_text("{")
    assert run(["match", "--scene", str(files / "bad.json"), "--preds", str(files / "preds.json")]) == 2
    assert run(["match", "--scene", str(files / "missing.json"), "--preds", str(files / "preds.json")]) == 2
    assert run(["match", "--scene", str(files / "scene.json")]) == 2
    assert run(["match", "--scene", "x", "--preds", "y", "--form", "cubic"]) == 2
    assert "error" in capsys.readouterr().err


def test_match_empty_predictions_exit_1(files):
    (files / "empty.json").write_text("[]")
    assert run(["match", "--scene", str(files / "scene.json"), "--preds", str(files / "empty.json")]) == 1


def test_eval_report_and_csv(files, capsys):
    csv_path = files / "report.csv"
    assert run(["eval", "--gt", str(files / "scene.json"), "--preds", str(files / "preds.json"),
                "--tau", "0.05", "--csv", str(csv_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    # the 0.1/0.1 prediction is filtered out; the 0.7 prediction is 0.1 away
    assert (report["tp"], report["fp"], report["fn"]) == (1, 1, 1)
    assert report["mae"] == 0.0
    header, row = csv_path.read_text().splitlines()
    assert header.split(",")[:3] == list(report)[:3]


def test_eval_in_pixels(files, capsys):
    assert run(["eval", "--gt", str(files / "scene.json"), "--preds", str(files / "preds.json"),
                "--tau", "11", "--units", "pixels", "--image-size", "100", "100"]) == 0
    assert json.loads(capsys.readouterr().out)["tp"] == 2


def test_eval_usage_errors(files):
    gt, pr = str(files / "scene.json"), str(files / "preds.json")
    assert run(["eval", "--gt", gt, "--preds", pr]) == 2  # no --tau default
    assert run(["eval", "--gt", gt, "--preds", pr, "--tau", "1", "--units", "pixels"]) == 2
    assert run(["eval", "--gt", gt, "--preds", pr, "--tau", "1", "--image-size", "10", "10"]) == 2
    assert run(["eval", "--gt", gt, gt, "--preds", pr, "--tau", "1"]) == 2
    assert run(["eval", "--gt", gt, "--preds", pr, "--tau", "0"]) == 1


def test_decode_on_scene_file(files, capsys):
    out = files / "decoded.json"
    traj = files / "traj.json"
    assert run(["decode", "--scene", str(files / "scene.json"), "--queries", "4", "--layers", "2",
                "--out", str(out), "--dump-trajectories", str(traj)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["num_predictions"] == 4 and summary["config"]["channels"] == 4
    assert len(json.loads(out.read_text())) == 4
    assert [e["layer"] for e in json.loads(traj.read_text())["layers"]] == [0, 1, 2]


def test_decode_is_byte_identical_across_runs(files):
    for name in ("a", "b"):
        assert run(["decode", "--queries", "4", "--layers", "2", "--channels", "8",
                    "--out", str(files / f"{name}.json"), "--dump-trajectories", str(files / f"{name}.t")]) == 0
    assert (files / "a.json").read_bytes() == (files / "b.json").read_bytes()
    assert (files / "a.t").read_bytes() == (files / "b.t").read_bytes()


def test_decode_config_file_and_conflicts(files, capsys):
    cfg = files / "cfg.json"
    cfg.write_text(json.dumps({"num_queries": 4, "num_layers": 1, "channels": 8, "num_heads": 4}))
    assert run(["decode", "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["num_heads"] == 4
    assert run(["decode", "--scene", str(files / "scene.json"), "--channels", "8"]) == 2
    assert run(["decode", "--scene", str(files / "scene.json"), "--config", str(cfg)]) == 2
    (files / "junk.json").write_text("[1, 2]")
    assert run(["decode", "--config", str(files / "junk.json")]) == 2
    assert run(["decode", "--queries", "0"]) == 2


def test_decode_grid_too_small_exit_1(tmp_path):
    save_scene(make_scene([(0.5, 0.5)], height=2, width=2), tmp_path / "tiny.json")
    assert run(["decode", "--scene", str(tmp_path / "tiny.json"), "--queries", "8"]) == 1


def test_gradcheck(capsys):
    assert run(["gradcheck", "--seeds", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and all(line.endswith("PASS") for line in lines)
    assert run(["gradcheck", "--seeds", "0"]) == 2


def test_lab_ambiguity_csv(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"n_pos": 5, "n_neg": 5, "min_separation": 0.1, "channels": 4, "grid_size": [6, 6]}))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["lab", "ambiguity", "--seeds", "3", "--config", str(cfg), "--out", str(a)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_seeds"] == 3 and len(summary["matchers"]) == 2
    assert run(["lab", "ambiguity", "--seeds", "3", "--config", str(cfg), "--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 1 + 2 * 3


def test_lab_ablation_to_stdout(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"n_pos": 5, "n_neg": 5, "min_separation": 0.1, "channels": 4, "grid_size": [6, 6]}))
    assert run(["lab", "ablation", "--seeds", "2", "--config", str(cfg)]) == 0
    captured = capsys.readouterr()
    assert captured.out.splitlines()[0] == "formulation,expression,mean_rate,spread"
    assert "Exponential Ratio" in captured.err


def test_lab_errors(tmp_path):
    assert run(["lab", "ablation", "--seeds", "0"]) == 2
    assert run(["lab", "ambiguity", "--jobs", "0"]) == 2
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"n_pos": 40, "n_neg": 40, "min_separation": 0.4}))
    assert run(["lab", "ambiguity", "--seeds", "1", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["lab", "ambiguity", "--seeds", "1", "--config", str(cfg)]) == 2
