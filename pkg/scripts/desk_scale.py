"""Desk-scale experiment: 32x32 frames, 2 objects, 3 slots.

Stages (run in order, each skips work whose outputs already exist):

    data         train/val/test datasets
    train-obai   full model
    train-static per-frame ablation without action and dynamics terms
    eval         segmentation, reconstruction and 2-step prediction on test videos
    pref         centred position preference from 2,000 static single-object scenes
    plan         one-step greedy planning on 200 static test scenes

    python scripts/desk_scale.py --root /root/runs/desk all
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from obai.env import DatasetConfig, EnvConfig, generate_dataset, load_dataset
from obai.inference import Noise
from obai.planner import centroid_progress, plan_scenes
from obai.preference import PositionPreference, Preference, collect_env_samples, fit_preference
from obai.train import TrainConfig, evaluate, load_checkpoint, train, write_report
from obai.viz import plan_figure, save

log = logging.getLogger("desk_scale")

FRAME = 32
N_OBJECTS = 2
EPOCHS = 2  # wall-clock bound on one CPU core


def train_config(static: bool) -> TrainConfig:
    return TrainConfig(batch=16, n_slots=3, decoder_channels=16, epochs=EPOCHS, tau_anneal_epochs=EPOCHS,
                       static=static, checkpoint_every=25, seed=0)


def stage_data(root: Path):
    env = EnvConfig.scaled(FRAME, N_OBJECTS)
    for name, n, frames, seed in (("train", 5000, 4, 1), ("val", 200, 4, 2), ("test", 200, 6, 3)):
        out = root / "data" / name
        if (out / "manifest.json").exists():
            continue
        log.info("generating %s", out)
        generate_dataset(DatasetConfig(n_videos=n, n_frames=frames, seed=seed, env=env), out)


def stage_train(root: Path, static: bool):
    run = root / ("static" if static else "obai")
    done = run / "done.json"
    if done.exists():
        return
    cfg = train_config(static)
    t0 = time.time()
    resume = (run / "checkpoint").exists()
    train(root / "data" / "train", cfg, run, val_dir=root / "data" / "val", resume=resume)
    done.write_text(json.dumps({"seconds": time.time() - t0, "resumed": resume}))


def stage_eval(root: Path):
    test = load_dataset(root / "data" / "test")
    for name in ("obai", "static"):
        out = root / name / "eval"
        if (out / "eval_report.json").exists():
            continue
        model, cfg, _ = load_checkpoint(root / name / "checkpoint")
        model.eval()
        t0 = time.time()
        rep = evaluate(model, test, cfg, n_observed=4)
        write_report(rep, out)
        log.info("%s: ARI %.3f FARI %.3f MSE %.2e (%.0fs)", name, rep.ari, rep.fari, rep.mse, time.time() - t0)


GOAL = (16.0, 16.0)
GOAL_SD = 4.0
N_PREF = 2000
N_PLAN = 200


def stage_pref(root: Path):
    out = root / "pref"
    if (out / "preference" / "manifest.json").exists():
        return
    model, cfg, _ = load_checkpoint(root / "obai" / "checkpoint")
    model.eval()
    ptrue = PositionPreference(GOAL, GOAL_SD)
    t0 = time.time()
    samples, dropped = collect_env_samples(model, EnvConfig.scaled(FRAME, N_OBJECTS), ptrue, N_PREF, seed=21,
                                           tau=cfg.gumbel().tau(10 ** 6), inference_config=cfg.inference_config())
    pref = fit_preference(samples, {"goal": GOAL, "sd": GOAL_SD, "n": N_PREF, "dropped": dropped})
    pref.save(out / "preference")
    (out / "summary.json").write_text(json.dumps({"n_samples": len(samples), "dropped": dropped,
                                                  "seconds": time.time() - t0,
                                                  "mean": pref.mean.tolist(), "std": pref.std.tolist()}, indent=1))


def stage_plan(root: Path):
    out = root / "plan"
    if (out / "plan_report.json").exists():
        return
    scenes = root / "data" / "plan_scenes"
    if not (scenes / "manifest.json").exists():
        env = dataclasses.replace(EnvConfig.scaled(FRAME, N_OBJECTS), velocity_sd=0.0)
        generate_dataset(DatasetConfig(n_videos=N_PLAN, n_frames=1, seed=4, env=env), scenes)
    model, cfg, _ = load_checkpoint(root / "obai" / "checkpoint")
    model.eval()
    pref = Preference.load(root / "pref" / "preference")
    recs = load_dataset(scenes)
    noise = Noise(torch.Generator().manual_seed(5))
    rows = []
    for i in range(0, len(recs), 20):
        chunk = recs[i:i + 20]
        frames = torch.from_numpy(np.stack([r.frames[0] for r in chunk])).permute(0, 3, 1, 2)
        plans = plan_scenes(model, frames, pref, cfg.inference_config(), tau=cfg.gumbel().tau(10 ** 6), noise=noise)
        for j, p in enumerate(plans):
            dist = centroid_progress(p, GOAL)
            rows.append({"scene": i + j, "before": dist[:, 0].tolist(), "after": dist[:, 1].tolist(),
                         "closer": bool(np.all(dist[:, 1] < dist[:, 0])),
                         "actions": p.actions.tolist(), "feef_before": p.feef_before, "feef_after": p.feef_after})
            if i + j < 6:
                save(plan_figure(chunk[j].frames[0], p.soft_masks, p.field, p.imagined), out / f"plan_{i + j:03d}.png")
    frac = float(np.mean([r["closer"] for r in rows]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan_report.json").write_text(json.dumps({"goal": GOAL, "fraction_closer": frac, "scenes": rows},
                                                     indent=1))
    log.info("centroids closer to goal on %.1f%% of scenes", 100 * frac)


STAGES = ["data", "train-obai", "train-static", "eval", "pref", "plan"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("stage", choices=STAGES + ["all"])
    p.add_argument("--root", type=Path, default=Path("runs/desk"))
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    args.root.mkdir(parents=True, exist_ok=True)
    todo = STAGES if args.stage == "all" else [args.stage]
    for stage in todo:
        t0 = time.time()
        if stage == "data":
            stage_data(args.root)
        elif stage == "train-obai":
            stage_train(args.root, static=False)
        elif stage == "train-static":
            stage_train(args.root, static=True)
        elif stage == "eval":
            stage_eval(args.root)
        elif stage == "pref":
            stage_pref(args.root)
        elif stage == "plan":
            stage_plan(args.root)
        log.info("stage %s finished in %.0fs", stage, time.time() - t0)


if __name__ == "__main__":
    main()
