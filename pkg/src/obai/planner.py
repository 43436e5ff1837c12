"""Planning in latent space toward a preference distribution.

A policy is scored by summing KL(q(s_tau | policy) || preference) over future
steps and slots; the greedy one-step action per slot has a closed form as a
weighted least-squares solution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .model import dynamics_predict
from .preference import Preference

log = logging.getLogger(__name__)


@dataclass
class Policy:
    """Actions (T, K, 2); ``actions[tau]`` drives the transition into step tau + 1."""
    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 3 or self.actions.shape[0] < 1 or self.actions.shape[-1] != 2:
            raise ValueError("policy actions must have shape (T >= 1, K, 2)")
        if not np.all(np.isfinite(self.actions)):
            raise ValueError("policy actions must be finite")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclass
class FeefValue:
    total: float
    terms: np.ndarray  # (T, K)


def kl_diag_normal(m1, v1, m2, v2) -> np.ndarray:
    """KL(N(m1, v1) || N(m2, v2)) for diagonal Normals, summed over the last axis."""
    m1, v1, m2, v2 = (np.asarray(x, dtype=np.float64) for x in (m1, v1, m2, v2))
    return 0.5 * (np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0).sum(-1)


def feef(policy: Policy, mean, var, preference: Preference, D, sigma_s: float,
         include_velocity: bool = False) -> FeefValue:
    """Free energy of the expected future of ``policy``.

    ``mean``/``var`` are current beliefs over ``[s, s']`` for K slots (K, 2d).
    Beliefs are rolled forward with the policy's actions (treated as known,
    zero variance) and compared with the preference on the ``s`` block, or on
    both blocks when ``include_velocity``.
    """
    mean = torch.as_tensor(np.asarray(mean), dtype=torch.float64)
    var = torch.as_tensor(np.asarray(var), dtype=torch.float64)
    D = torch.as_tensor(np.asarray(D), dtype=torch.float64)
    d = D.shape[0]
    if include_velocity:
        pm, ps = preference.full()
    else:
        pm, ps = preference.mean, preference.std
    terms = np.zeros((policy.horizon, mean.shape[0]))
    for tau in range(policy.horizon):
        a = torch.as_tensor(policy.actions[tau])
        mean, var = dynamics_predict(mean, var, a, torch.zeros_like(a), D, sigma_s)
        if include_velocity:
            terms[tau] = kl_diag_normal(mean.numpy(), var.numpy(), pm, ps ** 2)
        else:
            terms[tau] = kl_diag_normal(mean[:, :d].numpy(), var[:, :d].numpy(), pm, ps ** 2)
    return FeefValue(float(terms.sum()), terms)


def greedy_action(mu_s, preference: Preference, D, mu_velocity=None,
                  velocity_compensated: bool = False) -> np.ndarray:
    """One-step action per slot: (D^T L D)^-1 D^T L (goal - mu_s), L = diag(pref_std^-2).

    ``mu_s`` is (K, d) or (d,). With ``velocity_compensated`` the target also
    subtracts the current velocity belief ``mu_velocity``, since the next state
    mean is mu_s + mu_velocity + D a.
    """
    D = np.asarray(D, dtype=np.float64)
    mu = np.asarray(mu_s, dtype=np.float64)
    L = preference.precision
    A = D.T @ (L[:, None] * D)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("D^T L D is singular; regularize D or the preference")
    target = preference.mean - mu
    if velocity_compensated:
        if mu_velocity is None:
            raise ValueError("velocity-compensated planning needs mu_velocity")
        target = target - np.asarray(mu_velocity, dtype=np.float64)
    rhs = (target * L) @ D
    return np.linalg.solve(A, rhs.T).T


def one_step_objective(a, mu_s, preference: Preference, D, mu_velocity=None) -> float:
    """Weighted squared distance between the predicted mean and the goal."""
    pred = np.asarray(mu_s) + (0 if mu_velocity is None else np.asarray(mu_velocity)) + np.asarray(D) @ a
    return float((preference.precision * (preference.mean - pred) ** 2).sum())


def background_slot(soft_masks) -> int:
    """The slot with the largest total mask mass."""
    return int(np.asarray(soft_masks).sum(axis=(-2, -1)).argmax())


def action_to_field(actions, soft_masks, exclude=()) -> np.ndarray:
    """Place each slot's action on the pixel where that slot's mask peaks.

    actions (K, 2); soft_masks (K, H, W). Slots in ``exclude`` (e.g. the
    background) get nothing. When the peak pixel is already used, the slot's
    next-best pixel is taken.
    """
    actions = np.asarray(actions, dtype=np.float64)
    m = np.asarray(soft_masks, dtype=np.float64)
    k, h, w = m.shape
    field = np.zeros((h, w, 2))
    used = set()
    for slot in range(k):
        if slot in exclude or not np.any(actions[slot]):
            continue
        if m[slot].max() < 0.5:
            log.warning("slot %d has no dominant pixel (max mask %.3f)", slot, m[slot].max())
        for i in np.argsort(-m[slot].reshape(-1), kind="stable"):
            if i not in used:
                used.add(int(i))
                field[i // w, i % w] = actions[slot]
                break
    return field


def imagine(model, mean, var, actions):
    """Decode the state predicted one step ahead under ``actions``.

    mean/var (K, 2d) beliefs of one frame; actions (K, 2). Returns
    (DecoderOutput, predicted mean).
    """
    dt = model.D.dtype
    mean = torch.as_tensor(mean, dtype=dt)
    var = torch.as_tensor(var, dtype=dt)
    a = torch.as_tensor(np.asarray(actions), dtype=dt)
    with torch.no_grad():
        m, _ = model.gen.dynamics_predict(mean, var, a, torch.zeros_like(a))
        return model.decode(m), m


@dataclass
class PlanResult:
    soft_masks: np.ndarray     # (K, H, W) inferred
    reconstruction: np.ndarray  # (H, W, 3)
    background: int
    actions: np.ndarray        # (K, 2); zero for the background slot
    field: np.ndarray          # (H, W, 2)
    imagined: np.ndarray       # (H, W, 3)
    imagined_masks: np.ndarray  # (K, H, W)
    feef_before: float
    feef_after: float


def plan_scenes(model, frames, preference: Preference, inference_config=None, tau: float = 0.2,
                noise=None, velocity_compensated: bool = False) -> list[PlanResult]:
    """Infer each still image, plan one greedy action per object slot and
    imagine the outcome. ``frames`` is (B, 3, H, W)."""
    from .inference import InferenceConfig, run_inference

    b = frames.shape[0]
    dt = model.D.dtype
    frames = frames.to(dt)[:, None]
    fields = torch.zeros(b, 1, *frames.shape[-2:], 2, dtype=dt)
    res = run_inference(model, frames, fields, inference_config or InferenceConfig(), tau=tau, noise=noise)
    d = model.config.latent_dim
    D = model.D.detach().double().numpy()
    sigma_s = model.config.sigma_s
    out = []
    for j in range(b):
        mean = res.beliefs.state_mean[j, 0].double().numpy()
        var = (res.beliefs.state_std[j, 0] ** 2).double().numpy()
        masks = res.outputs.soft_assignments[j, 0].double().numpy()
        bg = background_slot(masks)
        acts = greedy_action(mean[:, :d], preference, D, mean[:, d:], velocity_compensated)
        acts[bg] = 0.0
        field = action_to_field(acts, masks, exclude=(bg,))
        dec, _ = imagine(model, mean, var, acts)
        fg = [k for k in range(len(acts)) if k != bg]
        zero = Policy(np.zeros((1, len(fg), 2)))
        before = feef(zero, mean[fg], var[fg], preference, D, sigma_s).total
        after = feef(Policy(acts[None, fg]), mean[fg], var[fg], preference, D, sigma_s).total
        out.append(PlanResult(masks, res.outputs.reconstruction()[j, 0].permute(1, 2, 0).double().numpy(), bg,
                              acts, field, dec.reconstruction().permute(1, 2, 0).double().numpy(),
                              dec.soft_assignments.double().numpy(), before, after))
    return out


def centroid_progress(plan: PlanResult, goal) -> np.ndarray:
    """Distance of each foreground slot's mask centroid to ``goal`` (x, y)
    before and after the imagined action: (n_fg, 2)."""
    from .metrics import mask_centroids

    fg = [k for k in range(len(plan.actions)) if k != plan.background]
    goal = np.asarray(goal, dtype=np.float64)
    before = np.linalg.norm(mask_centroids(plan.soft_masks[fg]) - goal, axis=-1)
    after = np.linalg.norm(mask_centroids(plan.imagined_masks[fg]) - goal, axis=-1)
    return np.stack([before, after], axis=-1)
