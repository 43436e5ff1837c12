"""Training loop, checkpointing, evaluation and future-frame prediction."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .env import VideoRecord, load_dataset
from .inference import OBAI, InferenceConfig, Noise, run_inference
from .losses import GumbelConfig, composite_loss
from .metrics import ari, mse
from .model import ModelConfig
from .nn import load_tensors, save_tensors

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    lr_decay: float = 3.0
    lr_patience: int = 10
    lr_min: float = 3e-5
    batch: int = 64
    n_slots: int = 4
    beta: float = 5.0
    sigma_o: float = 0.3
    sigma_s: float = 0.1
    sigma_psi: float = 0.3
    epochs: int = 1
    seed: int = 0
    latent_dim: int = 16
    decoder_channels: int = 32
    decoder_layers: int = 4
    iters_per_frame: int = 4
    tau_start: float = 1.0
    tau_end: float = 0.2
    tau_anneal_epochs: int = 50
    static: bool = False
    grad_clip_norm: float = 0.0  # 0 disables
    max_steps: int = 0           # 0 = no limit; for smoke runs
    n_train: int = 0             # 0 = whole dataset
    n_val: int = 0
    checkpoint_every: int = 0    # steps; 0 = end of epoch only

    def __post_init__(self):
        if self.lr_min > self.lr:
            raise ValueError("lr_min must not exceed lr")
        if min(self.sigma_o, self.sigma_s, self.sigma_psi) <= 0:
            raise ValueError("noise standard deviations must be positive")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def model_config(self, frame_size) -> ModelConfig:
        return ModelConfig(latent_dim=self.latent_dim, n_slots=self.n_slots, frame_size=tuple(frame_size),
                           decoder_channels=self.decoder_channels, decoder_layers=self.decoder_layers,
                           sigma_o=self.sigma_o, sigma_s=self.sigma_s, sigma_psi=self.sigma_psi,
                           seed=self.seed)

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(iters_per_frame=self.iters_per_frame, beta=self.beta, static=self.static)

    def gumbel(self) -> GumbelConfig:
        return GumbelConfig(self.tau_start, self.tau_end, self.tau_anneal_epochs)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:10]

    # flat key=value text
    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ValueError(f"line {lineno}: unknown key {k!r}")
            kw[k] = _parse_value(v, types[k])
        return cls(**kw)


def _parse_value(v: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if v.lower() in ("1", "true", "yes"):
            return True
        if v.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {v!r}")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


class PlateauSchedule:
    """Divide the learning rate by ``factor`` whenever the validation loss has
    not improved on its best value for ``patience`` epochs; never below ``lr_min``."""

    def __init__(self, lr: float, factor: float = 3.0, patience: int = 10, lr_min: float = 3e-5):
        self.lr, self.factor, self.patience, self.lr_min = lr, factor, patience, lr_min
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr / self.factor, self.lr_min)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}

    def load(self, st: dict) -> None:
        self.lr, self.best, self.bad_epochs = st["lr"], st["best"], st["bad_epochs"]


def to_tensors(records: list[VideoRecord], n_frames: int | None = None):
    """Stack records into (B, F, 3, H, W) frames and (B, F, H, W, 2) fields."""
    fr = np.stack([r.frames[:n_frames] for r in records])
    fi = np.stack([r.action_fields[:n_frames] for r in records])
    dt = torch.get_default_dtype()
    return (torch.from_numpy(fr).permute(0, 1, 4, 2, 3).contiguous().to(dt),
            torch.from_numpy(fi).contiguous().to(dt))


def static_view(frames, fields):
    """Treat every frame as an independent single-frame video."""
    b, f = frames.shape[:2]
    return frames.reshape(b * f, 1, *frames.shape[2:]), fields.reshape(b * f, 1, *fields.shape[2:])


def build_model(config: TrainConfig, frame_size) -> OBAI:
    torch.manual_seed(config.seed)
    return OBAI(config.model_config(frame_size))


# ----------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: OBAI, config: TrainConfig, opt=None, sched=None, noise_gen=None,
                    progress: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        for i, st in opt.state_dict()["state"].items():
            for key, val in st.items():
                tensors[f"opt.{i}.{key}"] = torch.as_tensor(val, dtype=torch.float32).reshape(-1) \
                    if key == "step" else val
    if noise_gen is not None:
        tensors["rng.noise"] = noise_gen.get_state().to(torch.float32)
    meta = {
        "config": dataclasses.asdict(config),
        "frame_size": list(model.config.frame_size),
        "scheduler": sched.state() if sched else None,
        "opt_lr": opt.param_groups[0]["lr"] if opt else None,
        "progress": progress or {},
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path, opt_for=None):
    """Load a checkpoint; returns (model, config, extras)."""
    tensors, meta = load_tensors(path)
    try:
        config = TrainConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from e
    model = OBAI(config.model_config(meta["frame_size"]))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from e
    return model, config, {"tensors": tensors, "meta": meta}


def _restore_optimizer(opt, tensors, lr):
    sd = opt.state_dict()
    for i in range(len(sd["param_groups"][0]["params"])):
        if f"opt.{i}.exp_avg" in tensors:
            sd["state"][i] = {
                "step": tensors[f"opt.{i}.step"].reshape(()).clone(),
                "exp_avg": tensors[f"opt.{i}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"opt.{i}.exp_avg_sq"].clone(),
            }
    sd["param_groups"][0]["lr"] = lr
    opt.load_state_dict(sd)


# ----------------------------------------------------------------------------
# training

def _epoch_order(seed: int, epoch: int, n: int) -> torch.Tensor:
    return torch.randperm(n, generator=torch.Generator().manual_seed(seed * 1000003 + epoch))


def batch_loss(model, frames, fields, config: TrainConfig, tau: float, noise: Noise):
    if config.static:
        frames, fields = static_view(frames, fields)
    res = run_inference(model, frames, fields, config.inference_config(), tau=tau, noise=noise, train=True)
    return composite_loss(res.losses) / frames.shape[0], res


def validation_loss(model, frames, fields, config: TrainConfig, tau: float, batch: int = 32) -> float:
    """Mean final-iteration loss per video on held-out data."""
    noise = Noise(torch.Generator().manual_seed(config.seed + 99991))
    total, n = 0.0, 0
    for i in range(0, frames.shape[0], batch):
        fr, fi = frames[i:i + batch], fields[i:i + batch]
        if config.static:
            fr, fi = static_view(fr, fi)
        res = run_inference(model, fr, fi, config.inference_config(), tau=tau, noise=noise)
        total += float(res.losses[-1])
        n += fr.shape[0]
    return total / max(n, 1)


def train(data_dir, config: TrainConfig, run_dir, val_dir=None, resume: bool = False,
          log_every: int = 10) -> Path:
    """Train on a dataset directory and write checkpoints and a CSV log to ``run_dir``.

    Resuming continues from ``run_dir/checkpoint`` with the saved optimizer,
    scheduler and noise-generator state, reproducing the uninterrupted run.
    """
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(config.to_text(), encoding="utf-8")
    records = load_dataset(data_dir, config.n_train or None)
    frames, fields = to_tensors(records)
    if val_dir is not None:
        vrec = load_dataset(val_dir, config.n_val or None)
        vframes, vfields = to_tensors(vrec)
    else:
        vframes = vfields = None
    frame_size = frames.shape[-2:]
    n = frames.shape[0]

    model = build_model(config, frame_size)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = PlateauSchedule(config.lr, config.lr_decay, config.lr_patience, config.lr_min)
    noise_gen = torch.Generator().manual_seed(config.seed + 7)
    epoch, batch_idx, step = 0, 0, 0
    ckpt = run / "checkpoint"
    if resume:
        model, _, extra = load_checkpoint(ckpt)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        meta = extra["meta"]
        _restore_optimizer(opt, extra["tensors"], meta["opt_lr"])
        sched.load(meta["scheduler"])
        noise_gen.set_state(extra["tensors"]["rng.noise"].to(torch.uint8))
        epoch, batch_idx, step = (meta["progress"][k] for k in ("epoch", "batch", "step"))
        log.info("resumed at epoch %d batch %d step %d", epoch, batch_idx, step)
    noise = Noise(noise_gen)
    gumbel = config.gumbel()
    log_path = run / "train_log.csv"
    new_log = not (resume and log_path.exists())
    logf = open(log_path, "a" if not new_log else "w", newline="")
    writer = csv.writer(logf)
    if new_log:
        writer.writerow(["step", "epoch", "loss", "entropy", "reconstruction", "action", "dynamics",
                         "tau", "lr", "seconds"])
    n_batches = n // config.batch if n >= config.batch else 1

    def checkpoint(epoch, batch_idx, step):
        tmp = run / "checkpoint.tmp"
        save_checkpoint(tmp, model, config, opt, sched, noise_gen,
                        {"epoch": epoch, "batch": batch_idx, "step": step})
        if ckpt.exists():
            _rmtree(ckpt)
        tmp.rename(ckpt)

    try:
        while epoch < config.epochs:
            tau = gumbel.tau(epoch)
            order = _epoch_order(config.seed, epoch, n)
            while batch_idx < n_batches:
                if config.max_steps and step >= config.max_steps:
                    checkpoint(epoch, batch_idx, step)
                    return run
                t0 = time.time()
                idx = order[batch_idx * config.batch:(batch_idx + 1) * config.batch]
                loss, res = batch_loss(model, frames[idx], fields[idx], config, tau, noise)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                if config.grad_clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
                opt.step()
                step += 1
                batch_idx += 1
                bd = res.breakdowns[-1]
                writer.writerow([step, epoch, f"{float(loss.detach()):.6g}", *(f"{bd[k]:.6g}" for k in
                                 ("entropy", "reconstruction", "action", "dynamics")),
                                 f"{tau:.4f}", f"{opt.param_groups[0]['lr']:.3g}", f"{time.time() - t0:.2f}"])
                if step % log_every == 0:
                    logf.flush()
                    log.info("step %d epoch %d loss %.1f", step, epoch, float(loss))
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    checkpoint(epoch, batch_idx, step)
            if vframes is not None:
                vl = validation_loss(model, vframes, vfields, config, tau)
                lr = sched.step(vl)
                for g in opt.param_groups:
                    g["lr"] = lr
                with open(run / "val_log.csv", "a") as fh:
                    fh.write(f"{epoch},{vl:.6g},{lr:.3g}\n")
            epoch += 1
            batch_idx = 0
            checkpoint(epoch, batch_idx, step)
    finally:
        logf.close()
    return run


def _rmtree(p: Path):
    for child in p.iterdir():
        child.unlink()
    p.rmdir()


# ----------------------------------------------------------------------------
# prediction and evaluation

def predict_rollout(model: OBAI, beliefs, n_steps: int):
    """Decode the last inferred frame and ``n_steps`` zero-action extrapolations.

    Returns a list of ``n_steps + 1`` DecoderOutputs over (B, K, ...); entry 0
    reconstructs the last observed frame.
    """
    last = beliefs.frame(beliefs.n_frames - 1)
    mean, var = last.state_mean[:, 0], last.state_std[:, 0] ** 2
    zeros = torch.zeros_like(last.act_mean[:, 0])
    outs = []
    with torch.no_grad():
        outs.append(model.decode(mean))
        for _ in range(n_steps):
            mean, var = model.gen.dynamics_predict(mean, var, zeros, zeros)
            outs.append(model.decode(mean))
    return outs


@dataclass
class EvalReport:
    ari: float
    fari: float
    mse: float
    prediction_mse: list = field(default_factory=list)
    baseline_mse: list = field(default_factory=list)
    per_video: list = field(default_factory=list)
    pooling: str = "pixels pooled over frames within a video; metrics averaged over videos"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


def evaluate(model: OBAI, records: list[VideoRecord], config: TrainConfig, n_observed: int | None = None,
             batch: int = 16, tau: float | None = None, seed: int = 12345, pred_masks=None,
             reconstructions=None) -> EvalReport:
    """Segmentation/reconstruction metrics on held-out videos.

    The first ``n_observed`` frames are inferred; any remaining frames are
    predicted by zero-action rollout and scored against ground truth and
    against repeating the last observed frame. ``pred_masks`` /
    ``reconstructions`` (per video arrays) bypass the model, e.g. for
    oracle checks.
    """
    n_frames = records[0].n_frames
    n_obs = n_frames if n_observed is None else n_observed
    tau = config.gumbel().tau(10 ** 6) if tau is None else tau
    noise = Noise(torch.Generator().manual_seed(seed))
    per_video = []
    for i in range(0, len(records), batch):
        chunk = records[i:i + batch]
        frames, fields = to_tensors(chunk)
        if pred_masks is None or reconstructions is None:
            obs_f, obs_a = frames[:, :n_obs], fields[:, :n_obs]
            if config.static:
                b = obs_f.shape[0]
                res = run_inference(model, *static_view(obs_f, obs_a), config.inference_config(),
                                    tau=tau, noise=noise)
                m = res.outputs.soft_assignments.reshape(b, n_obs, *res.outputs.soft_assignments.shape[2:])
                rec = res.outputs.reconstruction().reshape(b, n_obs, 3, *frames.shape[-2:])
                rollouts = None
            else:
                res = run_inference(model, obs_f, obs_a, config.inference_config(), tau=tau, noise=noise)
                m = res.outputs.soft_assignments
                rec = res.outputs.reconstruction()
                rollouts = predict_rollout(model, res.beliefs, n_frames - n_obs) if n_frames > n_obs else None
            pm = m.argmax(dim=2).numpy()
            rc = rec.numpy()
        for j, r in enumerate(chunk):
            vid = i + j
            p = pred_masks[vid] if pred_masks is not None else pm[j]
            rc_j = reconstructions[vid] if reconstructions is not None else rc[j].transpose(0, 2, 3, 1)
            tm = r.true_masks[:n_obs]
            entry = {
                "video": vid,
                "ari": ari(p, tm),
                "fari": ari(p, tm, foreground_only=True),
                "mse": mse(rc_j, r.frames[:n_obs]),
            }
            if pred_masks is None and not config.static and n_frames > n_obs:
                preds = [o.reconstruction()[j].numpy().transpose(1, 2, 0) for o in rollouts[1:]]
                entry["prediction_mse"] = [mse(pf, r.frames[n_obs + s]) for s, pf in enumerate(preds)]
                entry["baseline_mse"] = [mse(r.frames[n_obs - 1], r.frames[n_obs + s])
                                         for s in range(len(preds))]
            per_video.append(entry)
    agg = lambda key: float(np.mean([e[key] for e in per_video]))
    report = EvalReport(agg("ari"), agg("fari"), agg("mse"), per_video=per_video)
    if per_video and "prediction_mse" in per_video[0]:
        report.prediction_mse = np.mean([e["prediction_mse"] for e in per_video], axis=0).tolist()
        report.baseline_mse = np.mean([e["baseline_mse"] for e in per_video], axis=0).tolist()
    return report


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    with open(out / "eval_per_video.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "ari", "fari", "mse"])
        for e in report.per_video:
            w.writerow([e["video"], f"{e['ari']:.6f}", f"{e['fari']:.6f}", f"{e['mse']:.6g}"])
