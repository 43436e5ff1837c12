"""Command-line entry point: ``obai <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("obai")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _data(fn, *args, **kw):
    """Call ``fn`` and report failures as data errors."""
    try:
        return fn(*args, **kw)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(str(e)) from e


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, args, extra: dict | None = None) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    items.update(extra or {})
    text = "".join(f"{k}={v}\n" for k, v in items.items())
    (out / "resolved_config.txt").write_text(text, encoding="utf-8")


def _load_model(path):
    from .train import load_checkpoint

    model, cfg, _ = _data(load_checkpoint, path)
    model.eval()
    return model, cfg


def _noise(seed):
    from .inference import Noise

    return Noise(torch.Generator().manual_seed(seed))


# ----------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    from .env import DatasetConfig, EnvConfig, generate_dataset

    if args.n < 1 or args.frames < 1 or args.objects < 1:
        raise ConfigError("--n, --frames and --objects must be positive")
    try:
        env = EnvConfig() if args.size == 64 else EnvConfig.scaled(args.size, args.objects)
        env = dataclasses.replace(env, n_objects=args.objects)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(args, "data")
    cfg = DatasetConfig(n_videos=args.n, n_frames=args.frames, seed=args.seed or 0, env=env)
    _data(generate_dataset, cfg, out, export_png=args.export_png)
    _write_resolved(out, args)
    print(f"wrote {args.n} videos to {out}")


def cmd_train(args):
    from .env import load_manifest
    from .train import TrainConfig, train

    try:
        cfg = TrainConfig.from_text(Path(args.config).read_text()) if args.config else TrainConfig()
        overrides = "\n".join(args.set or [])
        if overrides:
            base = cfg.to_text() + overrides
            cfg = TrainConfig.from_text(base)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except (OSError, ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(args, f"runs/{cfg.digest()[:12]}")
    _write_resolved(out, args, {"digest": cfg.digest()})
    if args.resume and not (out / "checkpoint").exists():
        raise DataError(f"no checkpoint to resume in {out}")
    _data(load_manifest, args.data)
    if args.val:
        _data(load_manifest, args.val)
    run = train(args.data, cfg, out, val_dir=args.val, resume=args.resume)
    print(f"run directory {run}")


def cmd_eval(args):
    from .env import load_dataset
    from .train import evaluate, to_tensors, write_report
    from .viz import save, segmentation_figure

    records = _data(load_dataset, args.data, args.limit)
    out = _out_dir(args, "eval")
    _write_resolved(out, args)
    if args.oracle:
        from .train import TrainConfig
        rep = evaluate(None, records, TrainConfig(), pred_masks=[r.true_masks for r in records],
                       reconstructions=[r.frames for r in records])
        write_report(rep, out)
        print(json.dumps({"ari": rep.ari, "fari": rep.fari, "mse": rep.mse}))
        return
    model, cfg = _load_model(args.checkpoint)
    rep = evaluate(model, records, cfg, n_observed=args.observed, seed=args.seed or 0)
    write_report(rep, out)
    # segmentation grids for the first few videos
    from .inference import run_inference
    from .train import static_view
    n_fig = min(args.figures, len(records))
    if n_fig:
        frames, fields = to_tensors(records[:n_fig], args.observed)
        if cfg.static:
            frames, fields = static_view(frames, fields)
        res = run_inference(model, frames, fields, cfg.inference_config(), tau=cfg.gumbel().tau(10 ** 6),
                            noise=_noise(args.seed or 0), record=bool(args.dump_inference))
        o = res.outputs
        t = args.observed or records[0].n_frames
        m = o.soft_assignments.reshape(n_fig, t, *o.soft_assignments.shape[-3:]).numpy()
        rgb = o.rgb_means.reshape(n_fig, t, *o.rgb_means.shape[-4:]).permute(0, 1, 2, 4, 5, 3).numpy()
        rec = o.reconstruction().reshape(n_fig, t, 3, *o.rgb_means.shape[-2:]).permute(0, 1, 3, 4, 2).numpy()
        for j in range(n_fig):
            r = records[j]
            save(segmentation_figure(r.frames[:t], rec[j], m[j], rgb[j], r.true_masks[:t]),
                 out / f"segmentation_{j:03d}.png")
        if args.dump_inference:
            from .viz import dump_inference
            dump_inference(res, frames, model, out / "inference_dump")
    print(json.dumps({"ari": rep.ari, "fari": rep.fari, "mse": rep.mse,
                      "prediction_mse": rep.prediction_mse, "baseline_mse": rep.baseline_mse}))


def cmd_predict(args):
    from .env import load_dataset
    from .inference import run_inference
    from .metrics import mse
    from .train import predict_rollout, to_tensors
    from .viz import prediction_figure, save

    if args.steps < 0 or args.observed < 1:
        raise ConfigError("--steps must be >= 0 and --observed >= 1")
    records = _data(load_dataset, args.data, args.limit)
    model, cfg = _load_model(args.checkpoint)
    if cfg.static:
        raise ConfigError("a static-image model has no dynamics to roll out")
    out = _out_dir(args, "predict")
    _write_resolved(out, args)
    frames, fields = to_tensors(records, args.observed)
    res = run_inference(model, frames, fields, cfg.inference_config(), tau=cfg.gumbel().tau(10 ** 6),
                        noise=_noise(args.seed or 0))
    outs = predict_rollout(model, res.beliefs, args.steps)
    rows = []
    for j, r in enumerate(records):
        preds = [o.reconstruction()[j].permute(1, 2, 0).numpy() for o in outs]
        truth = [r.frames[args.observed - 1 + s] if args.observed - 1 + s < r.n_frames else np.zeros_like(r.frames[0])
                 for s in range(len(preds))]
        rows.append({"video": j, "mse": [mse(p, t) for p, t in zip(preds, truth)]})
        if j < args.figures:
            save(prediction_figure(r.frames[:args.observed], preds, truth), out / f"prediction_{j:03d}.png")
    (out / "prediction.json").write_text(json.dumps(rows, indent=1))
    print(json.dumps({"mean_mse": np.mean([r["mse"] for r in rows], axis=0).tolist()}))


def cmd_learn_pref(args):
    from .env import env_config_from_manifest, load_manifest
    from .preference import PositionPreference, collect_env_samples, fit_preference

    try:
        ptrue = PositionPreference.parse(args.ptrue)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    model, cfg = _load_model(args.checkpoint)
    env = _data(lambda: env_config_from_manifest(load_manifest(args.data)))
    out = _out_dir(args, "preference")
    _write_resolved(out, args)
    samples, dropped = collect_env_samples(model, env, ptrue, args.n, seed=args.seed or 0,
                                           tau=cfg.gumbel().tau(10 ** 6), n_objects=args.objects,
                                           inference_config=cfg.inference_config())
    pref = fit_preference(samples, {"ptrue": args.ptrue, "n": args.n, "dropped": dropped})
    pref.save(out / "preference")
    print(f"preference from {len(samples)} samples ({dropped} dropped) saved to {out / 'preference'}")


def cmd_plan(args):
    from PIL import Image

    from .env import load_dataset
    from .planner import plan_scenes
    from .preference import Preference
    from .viz import plan_figure, save

    model, cfg = _load_model(args.checkpoint)
    pref = _data(Preference.load, args.pref)
    if args.image:
        img = _data(lambda: np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0)
        if img.shape[:2] != tuple(model.config.frame_size):
            raise DataError(f"image is {img.shape[:2]}, model expects {model.config.frame_size}")
        images = img[None]
    elif args.data:
        recs = _data(load_dataset, args.data, args.limit)
        images = np.stack([r.frames[0] for r in recs])
    else:
        raise ConfigError("plan needs --image or --data")
    out = _out_dir(args, "plan")
    _write_resolved(out, args)
    frames = torch.from_numpy(images).permute(0, 3, 1, 2).to(torch.get_default_dtype())
    plans = plan_scenes(model, frames, pref, cfg.inference_config(), tau=cfg.gumbel().tau(10 ** 6),
                        noise=_noise(args.seed or 0), velocity_compensated=args.velocity_compensated)
    summary = []
    for j, p in enumerate(plans):
        save(plan_figure(images[j], p.soft_masks, p.field, p.imagined), out / f"plan_{j:03d}.png")
        summary.append({"scene": j, "background_slot": p.background, "actions": p.actions.tolist(),
                        "feef_before": p.feef_before, "feef_after": p.feef_after})
    (out / "plan.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary[0] if len(summary) == 1 else {"scenes": len(summary)}))


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--float64-shadow", action="store_true", help="run in float64")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="obai", description="Object-based active inference on active-dSprites.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate an active-dSprites dataset")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--export-png", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--val", default=None)
    t.add_argument("--config", default=None, help="key=value file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="segmentation and reconstruction metrics")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--observed", type=int, default=None)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--figures", type=int, default=4)
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.add_argument("--dump-inference", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", parents=[common], help="roll dynamics forward from observed frames")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--observed", type=int, default=4)
    r.add_argument("--steps", type=int, default=2)
    r.add_argument("--limit", type=int, default=None)
    r.add_argument("--figures", type=int, default=4)
    r.set_defaults(func=cmd_predict)

    lp = sub.add_parser("learn-pref", parents=[common], help="learn a latent preference")
    lp.add_argument("--checkpoint", required=True)
    lp.add_argument("--data", required=True, help="dataset whose environment settings are reused")
    lp.add_argument("--ptrue", required=True, help="position preference 'mean,sd' or 'mx,my,sd'")
    lp.add_argument("--n", type=int, default=10000)
    lp.add_argument("--objects", type=int, default=1)
    lp.set_defaults(func=cmd_learn_pref)

    pl = sub.add_parser("plan", parents=[common], help="greedy one-step plan toward a preference")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--pref", required=True)
    pl.add_argument("--image", default=None)
    pl.add_argument("--data", default=None)
    pl.add_argument("--limit", type=int, default=None)
    pl.add_argument("--velocity-compensated", action="store_true")
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None) -> int:
    from .nn import float64_shadow
    from .train import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        with float64_shadow(args.float64_shadow):
            args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
