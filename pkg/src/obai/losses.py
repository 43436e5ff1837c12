"""ELBO objectives: per-frame terms, beta reweighting, composite loss over
refinement iterations, and the Gumbel-Softmax estimate of the action term."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import torch

from .model import (LOG_2PI, DecoderOutput, dynamics_log_prob, normal_logpdf,
                    pixel_log_likelihood, prior_log_prob)
from .nn import std_from_param


@dataclass
class GumbelConfig:
    """Gumbel-Softmax temperature, annealed exponentially from ``tau_start`` to
    ``tau_end`` over ``anneal_epochs`` and constant afterwards."""
    tau_start: float = 1.0
    tau_end: float = 0.2
    anneal_epochs: int = 50
    n_samples: int = 1

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperature must be positive")
        if self.tau_end > self.tau_start:
            raise ValueError("temperature schedule must be non-increasing")

    def tau(self, epoch: float = 0) -> float:
        frac = min(max(epoch, 0) / self.anneal_epochs, 1.0) if self.anneal_epochs > 0 else 1.0
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


@dataclass
class LossBreakdown:
    """Per-frame ELBO terms (each (T,) summed over batch, slots and pixels)."""
    entropy: torch.Tensor
    reconstruction: torch.Tensor
    action: torch.Tensor
    dynamics: torch.Tensor
    beta: float
    history: list = field(default_factory=list)

    @property
    def total(self) -> torch.Tensor:
        return -(self.entropy + self.beta * self.reconstruction + self.action + self.dynamics).sum()

    def as_dict(self) -> dict[str, float]:
        return {
            "entropy": float(self.entropy.detach().sum()),
            "reconstruction": float(self.reconstruction.detach().sum()),
            "action": float(self.action.detach().sum()),
            "dynamics": float(self.dynamics.detach().sum()),
            "total": float(self.total.detach()),
        }


def normal_entropy(std: torch.Tensor) -> torch.Tensor:
    """Entropy of a diagonal Normal, summed over the last axis."""
    return (0.5 * (LOG_2PI + 1.0) + torch.log(std)).sum(-1)


def gumbel_softmax(logits, tau: float, dim: int = -1, generator=None, uniform=None):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if uniform is None:
        uniform = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    g = -torch.log(-torch.log(uniform.clamp(1e-20, 1.0 - 1e-7)))
    return torch.softmax((logits + g) / tau, dim=dim)


def sampled_action_loglik(a_mean, a_vparam, mask_logits, field, sigma_psi: float,
                          tau: float, generator=None, n_samples: int = 1,
                          a_noise=None, uniform=None, a_sample=None) -> torch.Tensor:
    """Sampled lower bound on E_q(a)[log p(a | field)] per slot.

    Pixel assignments are drawn with Gumbel-Softmax over the slot axis of
    ``mask_logits`` (..., K, H, W); actions by reparameterization from
    (..., K, 2) beliefs, unless a single draw ``a_sample`` is supplied.
    ``field`` is (..., H, W, 2). Returns (..., K), averaged over ``n_samples``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    var = torch.as_tensor(sigma_psi ** 2, dtype=a_mean.dtype)
    total = 0.0
    for j in range(n_samples):
        m = gumbel_softmax(mask_logits, tau, dim=-3, generator=generator,
                           uniform=None if uniform is None else uniform[j])
        target = torch.einsum("...khw,...hwc->...kc", m, field)
        if a_sample is not None:
            a = a_sample
        else:
            eps = (torch.randn(a_mean.shape, generator=generator, dtype=a_mean.dtype)
                   if a_noise is None else a_noise[j])
            a = a_mean + std_from_param(a_vparam) * eps
        total = total + normal_logpdf(a, target, var).sum(-1)
    return total / n_samples


def _assignments(n_pixels: int, k: int):
    for combo in itertools.product(range(k), repeat=n_pixels):
        yield combo


def enumerate_action_expectation(a_mean, a_var, mask_logits, field, sigma_psi: float) -> torch.Tensor:
    """Exact E_q(a) E_p(m)[log N(a; sum_i [m_i=k] psi_i, sigma^2 I)] per slot.

    Small single instances only: mask_logits (K, P), field (P, 2), a_* (K, 2).
    """
    k, p = mask_logits.shape
    logp = torch.log_softmax(mask_logits.double(), dim=0)
    var = sigma_psi ** 2
    out = torch.zeros(k, dtype=torch.float64)
    for combo in _assignments(p, k):
        idx = torch.tensor(combo)
        lp = logp[idx, torch.arange(p)].sum()
        onehot = torch.nn.functional.one_hot(idx, k).double().T  # (K, P)
        target = onehot @ field.double()
        val = (-math.log(2 * math.pi * var) - ((a_mean.double() - target) ** 2).sum(-1) / (2 * var)
               - a_var.double().sum(-1) / (2 * var))
        out += lp.exp() * val
    return out


def jensen_gap(a_value, mask_logits, field, sigma_psi: float, max_pixels: int = 12, max_slots: int = 3):
    """Both sides of E_p(m)[log p(a|field,m)] <= log E_p(m)[p(a|field,m)],
    computed by enumerating every assignment. a_value (K, 2), mask_logits
    (K, P), field (P, 2). Returns per-slot (lhs, rhs)."""
    k, p = mask_logits.shape
    if p > max_pixels or k > max_slots:
        raise ValueError(f"instance too large to enumerate ({p} pixels, {k} slots)")
    logp = torch.log_softmax(mask_logits.double(), dim=0)
    var = sigma_psi ** 2
    a = a_value.double()
    lps, vals = [], []
    for combo in _assignments(p, k):
        idx = torch.tensor(combo)
        lps.append(logp[idx, torch.arange(p)].sum())
        target = torch.nn.functional.one_hot(idx, k).double().T @ field.double()
        vals.append(-math.log(2 * math.pi * var) - ((a - target) ** 2).sum(-1) / (2 * var))
    lps = torch.stack(lps)[:, None]
    vals = torch.stack(vals)
    lhs = (lps.exp() * vals).sum(0)
    rhs = torch.logsumexp(lps + vals, dim=0)
    return lhs, rhs


def composite_loss(losses) -> torch.Tensor:
    """sum_n (n / N) L_n over per-iteration losses L_1..L_N."""
    n = len(losses)
    if n == 0:
        raise ValueError("need at least one iteration loss")
    return sum((i + 1) / n * l for i, l in enumerate(losses))


def elbo(frames, fields, samples, a_samples, beliefs, outputs: DecoderOutput, model, beta: float,
         tau: float, generator=None, uniform=None, static: bool = False) -> LossBreakdown:
    """beta-ELBO terms for a window of T frames.

    frames (B, T, 3, H, W); fields (B, T, H, W, 2); ``samples`` are
    reparameterized draws of s_dag (B, T, K, 2d) already decoded into
    ``outputs`` and ``a_samples`` (B, T, K, 2) draws of the actions; the same
    draws serve every term. ``beliefs`` supplies the Normal parameters. With ``static``
    the action and temporal terms are dropped and every frame gets the
    standard-Normal prior (a per-frame static model).
    """
    cfg = model.config
    std = std_from_param(beliefs.state_vparam)
    a_std = std_from_param(beliefs.act_vparam)
    ent = normal_entropy(std).sum(-1)  # (B, T)
    if not static:
        ent = ent + normal_entropy(a_std).sum(-1)
    rec = pixel_log_likelihood(frames, outputs, cfg.sigma_o, reduce=True)  # (B, T)
    n_t = frames.shape[1]
    if static:
        act = torch.zeros_like(rec)
        dyn = prior_log_prob(samples).sum(-1)
    else:
        act = sampled_action_loglik(beliefs.act_mean, beliefs.act_vparam, outputs.mask_logits, fields,
                                    cfg.sigma_psi, tau, generator, uniform=uniform,
                                    a_sample=a_samples).sum(-1)
        parts = [prior_log_prob(samples[:, 0]).sum(-1)]
        if n_t > 1:
            parts.append(dynamics_log_prob(samples[:, 1:], samples[:, :-1], a_samples[:, :-1],
                                           model.D, cfg.sigma_s).sum(-1))
            dyn = torch.cat([parts[0][:, None], parts[1]], dim=1)
        else:
            dyn = parts[0][:, None]
    return LossBreakdown(ent.sum(0), rec.sum(0), act.sum(0), dyn.sum(0), beta)
