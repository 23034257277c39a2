import json
import subprocess
import sys

import pytest

from langsteer.cli import HashMismatch, load_agent, main, run_training
from langsteer.config import RunConfig
from langsteer.sim.tasks import sample_scene

TINY = {
    "task": "put_blocks", "n_demos": 2,
    "seeds": {"demos": 0, "train": 0, "eval": 100},
    "train": {"steps": 3, "lr": 0.01},
    "policy": {"n_rot": 36, "n_theta": 12, "max_freq": 5, "kernel_size": 11, "crop_size": 15, "width": 4,
               "n_blocks": 2, "smooth_sigma": 2.0},
    "semantic": {"n_views": 1},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    data = root / "data"
    assert main(["gen-demos", "--task", "put_blocks", "--n", "2", "--seed", "0", "--out", str(data),
                 "--config", str(cfg_path)]) == 0
    ckpt = root / "ckpt"
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(ckpt)]) == 0
    return root, cfg_path, data, ckpt


def test_gen_demos_layout(run):
    _, cfg_path, data, _ = run
    meta = json.loads((data / "dataset.json").read_text())
    assert meta["config_hash"] == RunConfig.load(cfg_path).config_hash()
    assert len(meta["episodes"]) == 2
    steps = sorted(data.glob("*/step*/manifest.json"))
    assert len(steps) == meta["n_steps"] >= 2
    m = json.loads(steps[0].read_text())
    assert set(m) >= {"instruction", "parsed", "pick_label", "place_label", "cameras"}


def test_gen_demos_is_reproducible(run, tmp_path):
    root, cfg_path, data, _ = run
    assert main(["gen-demos", "--task", "put_blocks", "--n", "2", "--seed", "0", "--out", str(tmp_path),
                 "--config", str(cfg_path)]) == 0
    for a in sorted(data.glob("*/step*/manifest.json")):
        b = tmp_path / a.relative_to(data)
        assert a.read_bytes() == b.read_bytes()


def test_pyramid_demos_have_six_steps(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "semantic": {"n_views": 1}}))
    assert main(["gen-demos", "--task", "pyramid", "--n", "1", "--seed", "0", "--out", str(tmp_path / "d"),
                 "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "d").glob("*/step*"))) == 6


def test_checkpoint_artifacts(run):
    _, cfg_path, _, ckpt = run
    manifest = json.loads((ckpt / "manifest.json").read_text())
    assert manifest["config_hash"] == RunConfig.load(cfg_path).config_hash()
    assert (ckpt / "crop_db" / "index.json").exists()
    assert (ckpt / "loss.csv").read_text().splitlines()[0] == "step,pick_loss,place_loss"
    assert len((ckpt / "loss.csv").read_text().splitlines()) == 1 + TINY["train"]["steps"]


def test_training_reruns_are_byte_identical(run, tmp_path):
    _, cfg_path, data, ckpt = run
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(tmp_path)]) == 0
    tensors = sorted(p.name for p in ckpt.glob("*.gemt"))
    assert tensors
    for name in tensors + ["manifest.json"]:
        a, b = (ckpt / name).read_bytes(), (tmp_path / name).read_bytes()
        if name == "manifest.json":
            a, b = (json.loads(x) for x in (a, b))
            a.pop("train_seconds"), b.pop("train_seconds")
        assert a == b, name


def test_eval_report(run, tmp_path, capsys):
    _, cfg_path, _, ckpt = run
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "2", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["config_hash"] == RunConfig.load(cfg_path).config_hash()
    assert len(rep["rewards"]) == 2 and all(0 <= r <= 1 for r in rep["rewards"])
    assert (tmp_path / "report.csv").read_text().startswith("episode,seed,reward,steps")


def test_eval_oracle_scores_100(tmp_path, capsys):
    assert main(["eval", "--oracle", "--task", "pack", "--episodes", "3", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["success"] == 100.0


def test_eval_refuses_a_foreign_config(run, tmp_path, capsys):
    _, _, _, ckpt = run
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "seeds": {"train": 9}}))
    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(other), "--episodes", "1"]) == 2
    assert "does not match" in capsys.readouterr().err
    with pytest.raises(HashMismatch):
        load_agent(ckpt, RunConfig.load(other))


def test_train_refuses_a_foreign_dataset(run, tmp_path):
    _, _, data, _ = run
    with pytest.raises(HashMismatch):
        run_training(RunConfig({**TINY, "n_demos": 3}), data)


def test_schema_violation_rejected_before_running(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"steps": "many"}}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "train/steps" in capsys.readouterr().err


def test_infer_writes_action_and_heatmaps(run, tmp_path, capsys):
    _, _, _, ckpt = run
    scene = tmp_path / "scene.json"
    scene.write_text(sample_scene("put_blocks", 5).to_json())
    assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene), "--instruction",
                 "put the red blocks in a green bowl", "--heatmaps", str(tmp_path / "png")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pick_phrase"] == "red blocks" and out["place_phrase"] == "green bowl"
    assert 0 <= out["pick"]["u"] < 128 and 0 <= out["place"]["v"] < 128
    names = {p.split("/")[-1] for p in out["heatmaps"]}
    assert {"pick_map_ws0.png", "place_map_ws0.png", "pick_volume_ws0.png", "place_volume_ws0.png"} <= names
    assert all((tmp_path / "png" / n).read_bytes()[:4] == b"\x89PNG" for n in names)


def test_stitched_single_workspace_matches_eval(run, tmp_path):
    _, _, _, ckpt = run
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "2", "--out", str(tmp_path / "a")]) == 0
    assert main(["eval-stitched", "--checkpoint", str(ckpt), "--workspaces", "1", "--episodes", "2",
                 "--out", str(tmp_path / "b")]) == 0
    a, b = (json.loads((tmp_path / x / "report.json").read_text()) for x in "ab")
    assert a["rewards"] == b["rewards"] and a["steps"] == b["steps"]


def test_audit_random_weights_c4(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    code = main(["audit-equivariance", "--random-weights", "--config", str(cfg), "--group", "C4", "--trials", "3"])
    out = capsys.readouterr().out
    assert "pick argmax translation" in out and "semantic frame averaging" in out
    assert code == (0 if "FAIL" not in out else 1)
    assert "FAIL  pick kernel steerability C4" not in out


def test_console_script_parse():
    r = subprocess.run([sys.executable, "-m", "langsteer.cli", "parse", "Pack the banana in the brown box"],
                       capture_output=True, text=True, check=True)
    assert json.loads(r.stdout) == {"pick": "banana", "place": "brown box", "template": "pack_in"}
    r = subprocess.run([sys.executable, "-m", "langsteer.cli", "parse", "sing a song"], capture_output=True, text=True)
    assert r.returncode == 2 and "nearest" in r.stderr
