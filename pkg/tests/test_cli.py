import json

import numpy as np
import pytest
import torch

from obai.cli import main
from obai.env import load_dataset
from obai.planner import plan_scenes
from obai.preference import Preference
from obai.train import load_checkpoint

TINY = ["--set", "batch=2", "--set", "n_slots=2", "--set", "latent_dim=4", "--set", "decoder_channels=4",
        "--set", "decoder_layers=2", "--set", "iters_per_frame=2", "--set", "epochs=1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "4", "--frames", "3", "--objects", "1", "--size", "16", "--seed", "1",
                 "--out-dir", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), *TINY, "--out-dir", str(root / "run"), "--threads", "1"]) == 0
    return root


def test_gen_is_reproducible(tmp_path):
    args = ["gen", "--n", "3", "--frames", "2", "--objects", "2", "--size", "16", "--seed", "4"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--export-png"]) == 0
    for f in sorted((tmp_path / "a").glob("*.adsp")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert len(list((tmp_path / "b").glob("*.png"))) == 3
    assert "seed=4" in (tmp_path / "a" / "resolved_config.txt").read_text()


def test_gen_static(tmp_path):
    assert main(["gen", "--n", "2", "--frames", "1", "--size", "16", "--out-dir", str(tmp_path)]) == 0
    recs = load_dataset(tmp_path)
    assert all(r.n_frames == 1 and not r.action_fields.any() for r in recs)


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as e:
        main(["gen", "--bogus"])
    assert e.value.code == 2


def test_bad_config_and_data(tmp_path):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("learning_rate=1\n")
    assert main(["train", "--data", str(tmp_path), "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out-dir", str(tmp_path / "r")]) == 3
    assert main(["eval", "--data", str(tmp_path / "missing"), "--oracle"]) == 3
    assert main(["gen", "--n", "0", "--out-dir", str(tmp_path / "g")]) == 2


def test_train_run_and_resume(workspace, tmp_path):
    run = workspace / "run"
    assert (run / "checkpoint" / "manifest.json").exists()
    assert "digest=" in (run / "resolved_config.txt").read_text()
    ext = tmp_path / "ext"
    assert main(["train", "--data", str(workspace / "data"), *TINY, "--set", "max_steps=1",
                 "--out-dir", str(ext)]) == 0
    assert main(["train", "--data", str(workspace / "data"), *TINY, "--out-dir", str(ext), "--resume"]) == 0
    with open(run / "train_log.csv") as a, open(ext / "train_log.csv") as b:
        assert [r.split(",")[2] for r in a] == [r.split(",")[2] for r in b]


def test_eval_oracle(workspace, tmp_path, capsys):
    assert main(["eval", "--data", str(workspace / "data"), "--oracle", "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "eval_report.json").read_text())
    assert rep["ari"] == 1.0 and rep["fari"] == 1.0 and rep["mse"] == 0.0


def test_eval_model_figures(workspace, tmp_path):
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "checkpoint"),
                 "--observed", "2", "--figures", "1", "--dump-inference", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "segmentation_000.png").exists()
    assert len(list((tmp_path / "inference_dump").glob("iter*.png"))) == 5
    rep = json.loads((tmp_path / "eval_report.json").read_text())
    assert len(rep["prediction_mse"]) == 1


def test_predict_zero_steps(workspace, tmp_path):
    assert main(["predict", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "checkpoint"),
                 "--observed", "2", "--steps", "0", "--out-dir", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "prediction.json").read_text())
    assert all(len(r["mse"]) == 1 for r in rows)
    assert (tmp_path / "prediction_000.png").exists()


def test_float64_shadow_runs(workspace, tmp_path):
    assert main(["predict", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "checkpoint"),
                 "--observed", "2", "--steps", "1", "--float64-shadow", "--out-dir", str(tmp_path)]) == 0
    assert torch.get_default_dtype() == torch.float32


def test_learn_pref_and_plan(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoint")
    assert main(["learn-pref", "--checkpoint", ck, "--data", str(workspace / "data"), "--ptrue", "8,2",
                 "--n", "6", "--out-dir", str(tmp_path / "pref")]) == 0
    pref = Preference.load(tmp_path / "pref" / "preference")
    assert pref.mean.shape == (4,) and pref.n_samples == 6
    assert main(["plan", "--checkpoint", ck, "--pref", str(tmp_path / "pref" / "preference"),
                 "--data", str(workspace / "data"), "--limit", "2", "--seed", "0", "--out-dir", str(tmp_path / "plan")]) == 0
    summary = json.loads((tmp_path / "plan" / "plan.json").read_text())
    assert len(summary) == 2 and (tmp_path / "plan" / "plan_001.png").exists()


def test_plan_at_goal_gives_zero_field(workspace):
    from obai.inference import Noise
    model, cfg, _ = load_checkpoint(workspace / "run" / "checkpoint")
    rec = load_dataset(workspace / "data", 1)[0]
    frame = torch.from_numpy(rec.frames[0]).permute(2, 0, 1)[None]

    def plan(pref):
        return plan_scenes(model, frame, pref, cfg.inference_config(), tau=cfg.gumbel().tau(10 ** 6),
                           noise=Noise(torch.Generator().manual_seed(0)))[0]

    probe = plan(Preference(np.zeros(4), np.ones(4)))
    fg = 1 - probe.background
    # beliefs do not depend on the preference, so this goal is the slot's current state
    from obai.inference import run_inference
    res = run_inference(model, frame[:, None].float(), torch.zeros(1, 1, 16, 16, 2), cfg.inference_config(),
                        tau=cfg.gumbel().tau(10 ** 6), noise=Noise(torch.Generator().manual_seed(0)))
    goal = res.beliefs.state_mean[0, 0, fg, :4].double().numpy()
    at_goal = plan(Preference(goal, np.ones(4)))
    np.testing.assert_allclose(at_goal.actions, 0.0, atol=1e-6)
    assert not at_goal.field.any() or np.abs(at_goal.field).max() < 1e-6


def test_plan_from_png(workspace, tmp_path):
    from PIL import Image
    rec = load_dataset(workspace / "data", 1)[0]
    Image.fromarray((rec.frames[0] * 255).round().astype(np.uint8)).save(tmp_path / "scene.png")
    Preference(np.zeros(4), np.ones(4)).save(tmp_path / "pref")
    ck = str(workspace / "run" / "checkpoint")
    assert main(["plan", "--checkpoint", ck, "--pref", str(tmp_path / "pref"), "--image", str(tmp_path / "scene.png"),
                 "--out-dir", str(tmp_path / "plan")]) == 0
    assert (tmp_path / "plan" / "plan_000.png").exists()
    Image.new("RGB", (5, 5)).save(tmp_path / "small.png")
    assert main(["plan", "--checkpoint", ck, "--pref", str(tmp_path / "pref"), "--image", str(tmp_path / "small.png"),
                 "--out-dir", str(tmp_path / "plan2")]) == 3
