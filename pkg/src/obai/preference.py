"""Latent-space goal (preference) distributions learned by importance weighting.

Goal scenes are rendered from true states drawn uniformly, inference gives a
Normal belief per object slot, and each belief is weighted by the density of
its true state under the desired true-state preference. The weighted mixture
of beliefs is summarized by its first two moments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .nn import load_tensors, save_tensors

log = logging.getLogger(__name__)

VELOCITY_PREF_SD = 10.0


@dataclass
class PreferenceSample:
    mu: np.ndarray
    sigma: np.ndarray
    weight: float

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("importance weights must be non-negative")


@dataclass
class Preference:
    """Normal preference over the slot state ``s``."""
    mean: np.ndarray
    std: np.ndarray
    n_samples: int = 0
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("preference standard deviations must be positive")

    @property
    def precision(self) -> np.ndarray:
        return self.std ** -2

    def full(self, velocity_sd: float = VELOCITY_PREF_SD):
        """Mean/std over generalized coordinates, with a broad zero-mean
        preference on the derivative block."""
        d = self.mean.shape[-1]
        return (np.concatenate([self.mean, np.zeros(d)]),
                np.concatenate([self.std, np.full(d, velocity_sd)]))

    def save(self, path) -> None:
        save_tensors(path, {"mean": torch.from_numpy(self.mean), "std": torch.from_numpy(self.std)},
                     {"kind": "preference", "n_samples": self.n_samples, "source": self.source})

    @classmethod
    def load(cls, path) -> "Preference":
        t, meta = load_tensors(path)
        if meta.get("kind") != "preference":
            raise ValueError(f"{path} is not a preference file")
        return cls(t["mean"].double().numpy(), t["std"].double().numpy(), meta.get("n_samples", 0),
                   meta.get("source", {}))


def fit_preference(samples: list[PreferenceSample], source: dict | None = None) -> Preference:
    """Moment-match the importance-weighted mixture of beliefs.

    mean = sum_j u_j mu_j / sum_j u_j
    std  = sqrt(sum_j u_j ((mean - mu_j)^2 + sigma_j^2) / sum_j u_j)
    """
    if not samples:
        raise ValueError("no preference samples")
    u = np.array([s.weight for s in samples], dtype=np.float64)
    if u.sum() <= 0:
        raise ValueError("all importance weights are zero")
    mu = np.stack([np.asarray(s.mu, dtype=np.float64) for s in samples])
    sig = np.stack([np.asarray(s.sigma, dtype=np.float64) for s in samples])
    w = u / u.sum()
    mean = w @ mu
    var = w @ ((mean - mu) ** 2 + sig ** 2)
    return Preference(mean, np.sqrt(var), len(samples), source or {})


@dataclass
class PositionPreference:
    """Isotropic Normal preference over true object positions (pixels)."""
    mean: tuple[float, float]
    sd: float

    def density(self, positions) -> float:
        """Product of per-object densities; ``positions`` is (N, 2)."""
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        d2 = ((p - np.asarray(self.mean)) ** 2).sum(-1)
        return float(np.prod(np.exp(-0.5 * d2 / self.sd ** 2) / (2 * np.pi * self.sd ** 2)))

    @classmethod
    def parse(cls, text: str) -> "PositionPreference":
        """``"m,sd"`` (same mean for x and y) or ``"mx,my,sd"``."""
        vals = [float(v) for v in text.split(",")]
        if len(vals) == 2:
            return cls((vals[0], vals[0]), vals[1])
        if len(vals) == 3:
            return cls((vals[0], vals[1]), vals[2])
        raise ValueError(f"expected 'mean,sd' or 'mx,my,sd', got {text!r}")


def collect_samples(sample_true, observe, infer, weight, n: int, rng) -> tuple[list[PreferenceSample], int]:
    """Generic importance-sampling loop.

    ``sample_true(rng)`` draws a true state, ``observe(state)`` renders it,
    ``infer(obs, state)`` returns a list of (mu, sigma) beliefs to pool and
    ``weight(state)`` gives u. Samples whose beliefs are non-finite are
    dropped; returns the samples and the number dropped.
    """
    out, dropped = [], 0
    for _ in range(n):
        st = sample_true(rng)
        u = weight(st)
        beliefs = infer(observe(st), st)
        for mu, sigma in beliefs:
            if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
                dropped += 1
                continue
            out.append(PreferenceSample(np.asarray(mu), np.asarray(sigma), u))
    if dropped:
        log.warning("dropped %d non-finite preference samples", dropped)
    return out, dropped


def foreground_slots(soft_masks, true_mask, n_objects: int) -> list[int]:
    """Slots carrying the most mask mass on true foreground pixels.

    soft_masks (K, H, W); true_mask (H, W) with 0 = background.
    """
    fg = (np.asarray(true_mask) > 0).astype(np.float64)
    mass = (np.asarray(soft_masks) * fg).sum(axis=(-2, -1))
    return [int(k) for k in np.argsort(-mass, kind="stable")[:n_objects]]


def collect_env_samples(model, env_config, ptrue: PositionPreference, n: int, seed: int = 0,
                        batch: int = 32, tau: float = 0.2, n_objects: int = 1,
                        inference_config=None):
    """Render ``n`` static scenes with uniformly drawn objects, infer slot
    beliefs with ``model`` and weight them by ``ptrue``.

    Beliefs of the ``n_objects`` slots with the most foreground mask mass are
    pooled (the background slot is excluded). Only the ``s`` block is kept.
    """
    import dataclasses

    from .env import make_rng, render, sample_scene
    from .inference import InferenceConfig, Noise, run_inference

    env = dataclasses.replace(env_config, n_objects=n_objects, velocity_sd=0.0)
    d = model.config.latent_dim
    noise = Noise(torch.Generator().manual_seed(seed + 31))
    samples, dropped = [], 0
    for start in range(0, n, batch):
        idx = range(start, min(start + batch, n))
        states = [sample_scene(make_rng(seed, i), n_objects, env.frame_size, env) for i in idx]
        rendered = [render(s) for s in states]
        frames = torch.from_numpy(np.stack([f for f, _ in rendered]))[:, None].permute(0, 1, 4, 2, 3)
        frames = frames.to(torch.get_default_dtype())
        fields = torch.zeros(frames.shape[0], 1, *env.frame_size, 2)
        res = run_inference(model, frames.contiguous(), fields, inference_config or InferenceConfig(), tau=tau, noise=noise)
        masks = res.outputs.soft_assignments[:, 0].numpy()
        mu = res.beliefs.state_mean[:, 0, :, :d].numpy()
        sd = res.beliefs.state_std[:, 0, :, :d].numpy()
        for j, st in enumerate(states):
            u = ptrue.density([o.position for o in st.objects])
            for k in foreground_slots(masks[j], rendered[j][1], n_objects):
                if not (np.all(np.isfinite(mu[j, k])) and np.all(np.isfinite(sd[j, k]))):
                    dropped += 1
                    continue
                samples.append(PreferenceSample(mu[j, k].astype(np.float64), sd[j, k].astype(np.float64), u))
    if dropped:
        log.warning("dropped %d non-finite preference samples", dropped)
    return samples, dropped

