import json
import math

import pytest

from mvc3d import train as train_mod
from mvc3d.cli import main
from mvc3d.model import load_checkpoint

SMALL = {
    "scene": {"n_frames": 5},
    "train_frames": 3,
    "channel_scale": 0.125,
    "stages": [{"epochs": 1, "beta": 1.0}, {"epochs": 1, "beta": 0.01}, {"epochs": 1, "beta": 0.01, "gamma": 10.0}],
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    base = ["--preset", "desk", "--config", str(cfg), "--seed", "4"]
    assert main(["gen-scene", *base, "--out", str(root / "scene")]) == 0
    scene = str(root / "scene" / "scene.json")
    assert main(["make-gt", *base, "--scene", scene, "--out", str(root / "gt")]) == 0
    return root, base, scene, str(root / "gt")


def run_train(workspace, name, *extra):
    root, base, scene, gt = workspace
    out = root / name
    code = main(["train", *base, "--scene", scene, "--gt", gt, "--out", str(out), *extra])
    return code, out


def test_gen_scene_idempotent(workspace, tmp_path):
    root, base, _, _ = workspace
    assert main(["gen-scene", *base, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scene.json").read_bytes() == (root / "scene" / "scene.json").read_bytes()


def test_gt_files(workspace):
    root = workspace[0]
    manifest = json.loads((root / "gt" / "manifest.json").read_text())
    assert manifest["schema"] == "mvc3d_gt_v1"
    assert len(manifest["frames"]) == 5
    assert (root / "gt" / "report.json").exists()


def test_eval_on_ground_truth(workspace, tmp_path, capsys):
    _, base, scene, gt = workspace
    assert main(["eval", *base, "--scene", scene, "--gt", gt, "--out", str(tmp_path),
                 "--ground-truth-as-prediction", "--frames", "all"]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["mae"] < 0.01
    assert metrics["view_mae"] < 0.01
    assert metrics["frames"] == 5


def test_train_deterministic_and_eval(workspace, tmp_path):
    code_a, a = run_train(workspace, "run_a")
    code_b, b = run_train(workspace, "run_b")
    assert code_a == code_b == 0
    assert (a / "checkpoint.zip").read_bytes() == (b / "checkpoint.zip").read_bytes()
    assert (a / "train_log.ndjson").read_text() == (b / "train_log.ndjson").read_text()
    records = [json.loads(line) for line in (a / "train_log.ndjson").read_text().splitlines()]
    assert len(records) == 9
    assert [r["stage"] for r in records] == [1] * 3 + [2] * 3 + [3] * 3
    assert all(math.isfinite(r["total"]) for r in records)

    _, base, scene, gt = workspace
    outs = []
    for k in range(2):
        out = tmp_path / f"eval{k}"
        assert main(["eval", *base, "--scene", scene, "--gt", gt, "--out", str(out),
                     "--checkpoint", str(a / "checkpoint.zip")]) == 0
        outs.append((out / "metrics.json").read_bytes())
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["frames"] == 2


def test_stagewise_training_matches_full_run(workspace):
    _, full = run_train(workspace, "full")
    prev = None
    for stage in (1, 2, 3):
        extra = ["--stage", str(stage)] + (["--resume", str(prev)] if prev else [])
        code, out = run_train(workspace, f"stage{stage}", *extra)
        assert code == 0
        prev = out / "checkpoint.zip"
    # optimizer moments restart per stage, so only stage 1 matches exactly
    p_full, _, _ = load_checkpoint(full / "checkpoint.zip")
    p_staged, _, m = load_checkpoint(prev)
    assert m["stage"] == 3
    assert set(p_full) == set(p_staged)
    _, s1 = run_train(workspace, "only1", "--stage", "1")
    log_full = (full / "train_log.ndjson").read_text().splitlines()
    log_s1 = (s1 / "train_log.ndjson").read_text().splitlines()
    assert log_s1 == log_full[:3]


def test_numeric_failure_exit_code(workspace, monkeypatch, capsys):
    real = train_mod.loss_total

    def poisoned(*args, **kw):
        out = real(*args, **kw)
        out.data = out.data * float("nan")
        return out

    monkeypatch.setattr(train_mod, "loss_total", poisoned)
    code, out = run_train(workspace, "nan")
    assert code == 3
    report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert report["exit_code"] == 3 and report["step"] == 0
    assert (out / "diagnostic_checkpoint.zip").exists()
    # the log of the crashed run is still parseable
    for line in (out / "train_log.ndjson").read_text().splitlines():
        json.loads(line)


@pytest.mark.parametrize("argv", [
    ["train", "--scene", "missing.json", "--gt", "missing", "--out", "x"],
    ["eval", "--scene", "missing.json", "--gt", "missing", "--out", "x"],
])
def test_missing_inputs(tmp_path, monkeypatch, capsys, argv):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    report = json.loads(capsys.readouterr().err)
    assert report["exit_code"] == 2


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"learning_rate": -1}')
    assert main(["gen-scene", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("{not json")
    assert main(["gen-scene", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "error" in json.loads(capsys.readouterr().err.splitlines()[-1])


def test_bad_scene_schema(workspace, tmp_path, capsys):
    _, base, _, gt = workspace
    bad = tmp_path / "s.json"
    bad.write_text('{"schema": "something_else"}')
    assert main(["make-gt", *base, "--scene", str(bad), "--out", str(tmp_path / "gt")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "SceneValidationError"


def test_debug_dumps(workspace, tmp_path, capsys):
    _, base, scene, gt = workspace
    assert main(["project", *base, "--scene", scene, "--frame", "1", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*_projected.t3dc"))) == 3
    capsys.readouterr()
    assert main(["pcm", *base, "--scene", scene, "--gt", gt, "--frame", "1"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert len(result["pcm"]) == 3
    assert all(0 <= v <= 1 for v in result["pcm"])
    assert main(["pcm", *base, "--scene", scene, "--gt", gt, "--frame", "99"]) == 2
