"""Iterative amortized inference over a growing window of video frames.

Two refinement networks, copied across slots and frames, read the current
decoding and a stochastic estimate of the ELBO gradient and emit additive
updates to the Normal belief parameters over states (refine_state) and object
actions (refine_action).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as tnn
import torch.nn.functional as F

from .losses import elbo
from .model import (DecoderOutput, GenerativeModel, ModelConfig, coordinate_channels,
                    expected_object_action, normal_logpdf)
from .nn import ELU, LayerStack, inv_softplus, std_from_param, truncated_normal_init

N_IMAGE_CHANNELS = 16
POOLED_SIZE = 40  # 40 -> 20 -> 10 -> 5 under three stride-2 convs; 32 * 5 * 5 = 800


@dataclass
class BeliefSet:
    """Normal belief parameters, each shaped (B, T, K, dim)."""
    state_mean: torch.Tensor
    state_vparam: torch.Tensor
    act_mean: torch.Tensor
    act_vparam: torch.Tensor

    @property
    def n_frames(self) -> int:
        return self.state_mean.shape[1]

    @property
    def state_std(self):
        return std_from_param(self.state_vparam)

    @property
    def act_std(self):
        return std_from_param(self.act_vparam)

    def tensors(self):
        return [self.state_mean, self.state_vparam, self.act_mean, self.act_vparam]

    def map(self, fn) -> "BeliefSet":
        return BeliefSet(*[fn(t) for t in self.tensors()])

    def frame(self, t: int) -> "BeliefSet":
        return self.map(lambda x: x[:, t:t + 1])

    def append(self, other: "BeliefSet") -> "BeliefSet":
        return BeliefSet(*[torch.cat([a, b], dim=1) for a, b in zip(self.tensors(), other.tensors())])

    def permute_slots(self, perm) -> "BeliefSet":
        return self.map(lambda x: x[:, :, perm])


class Noise:
    """Source of the random draws used during inference."""

    def __init__(self, generator: torch.Generator | None = None, perm=None):
        self.generator = generator
        self.perm = perm  # optional slot permutation applied to every draw

    def _fix(self, x):
        return x if self.perm is None else x[:, :, self.perm]

    def normal(self, shape, dtype):
        return self._fix(torch.randn(shape, generator=self.generator, dtype=dtype))

    def uniform(self, shape, dtype):
        return self._fix(torch.rand(shape, generator=self.generator, dtype=dtype))


class GradTape:
    """Records the stop-gradient ELBO gradients fed to the refiners and can
    replay them, so finite-difference checks see them as constants."""

    def __init__(self):
        self.grads: list = []
        self.replay = False

    def __call__(self, n, compute):
        if self.replay:
            return self.grads[n]
        g = compute()
        self.grads.append(g)
        return g


class StateRefiner(tnn.Module):
    def __init__(self, state_dim: int = 32, hidden: int = 128, seed: int = 0):
        super().__init__()
        self.conv = LayerStack([
            ("conv0", tnn.Conv2d(N_IMAGE_CHANNELS, 32, 5, stride=2, padding=2)), ("elu0", ELU()),
            ("conv1", tnn.Conv2d(32, 32, 5, stride=2, padding=2)), ("elu1", ELU()),
            ("conv2", tnn.Conv2d(32, 32, 5, stride=2, padding=2)), ("elu2", ELU()),
        ])
        self.fc = tnn.Linear(800, 128)
        self.lstm = tnn.LSTMCell(128 + 4 * state_dim, hidden)
        self.out = tnn.Linear(hidden, 2 * state_dim)
        self.hidden = hidden
        truncated_normal_init(self, seed)
        with torch.no_grad():
            self.out.weight.mul_(0.1)

    def forward(self, image, vector, lstm_state=None):
        if image.shape[1] != N_IMAGE_CHANNELS:
            raise ValueError(f"refinement expects {N_IMAGE_CHANNELS} image channels, got {image.shape[1]}")
        x = F.adaptive_avg_pool2d(image, POOLED_SIZE)
        x = self.conv(x).flatten(1)
        x = F.elu(self.fc(x))
        h, c = self.lstm(torch.cat([x, vector], dim=1), lstm_state)
        return self.out(h), (h, c)


class ActionRefiner(tnn.Module):
    def __init__(self, hidden: int = 32, seed: int = 0):
        super().__init__()
        self.lstm = tnn.LSTMCell(10, hidden)
        self.out = tnn.Linear(hidden, 4)
        self.hidden = hidden
        truncated_normal_init(self, seed)
        with torch.no_grad():
            self.out.weight.mul_(0.1)

    def forward(self, inputs, lstm_state=None):
        if inputs.shape[-1] != 10:
            raise ValueError(f"action refinement expects 10 inputs, got {inputs.shape[-1]}")
        h, c = self.lstm(inputs, lstm_state)
        return self.out(h), (h, c)


def refine_state(net: StateRefiner, image, vector, lstm_state=None):
    return net(image, vector, lstm_state)


def refine_action(net: ActionRefiner, inputs, lstm_state=None):
    return net(inputs, lstm_state)


@dataclass
class InferenceConfig:
    iters_per_frame: int = 4
    beta: float = 5.0
    static: bool = False
    grad_clip: float = 1e4


class OBAI(tnn.Module):
    """Generative model, refinement networks and learned initial beliefs."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.gen = GenerativeModel(config)
        d = config.state_dim
        self.state_refiner = StateRefiner(d, seed=config.seed + 2)
        self.action_refiner = ActionRefiner(seed=config.seed + 3)
        self.lambda0_state = tnn.Parameter(torch.cat([torch.zeros(d), inv_softplus(torch.ones(d))]))
        self.lambda0_action = tnn.Parameter(torch.cat([torch.zeros(2), inv_softplus(torch.ones(2))]))

    @property
    def D(self):
        return self.gen.D

    def decode(self, latents) -> DecoderOutput:
        return self.gen.decode(latents)

    def initial_beliefs(self, batch: int, n_frames: int = 1) -> BeliefSet:
        k, d = self.config.n_slots, self.config.state_dim
        s = self.lambda0_state.expand(batch, n_frames, k, 2 * d)
        a = self.lambda0_action.expand(batch, n_frames, k, 4)
        return BeliefSet(s[..., :d], s[..., d:], a[..., :2], a[..., 2:])


def _layer_norm(x, dims):
    return F.layer_norm(x, x.shape[-dims:])


def assemble_state_inputs(frames, beliefs: BeliefSet, out: DecoderOutput, grads, sigma_o: float):
    """Per-slot refinement inputs.

    Image channels, in order: frame RGB (3), slot RGB means (3), soft mask (1),
    mask logit (1), mask posterior given the pixel (1), mixture log-likelihood
    (1), loss gradient w.r.t. RGB means (3) and w.r.t. mask logits (1), x/y
    coordinates (2). Vector inputs are the 64 belief parameters followed by
    their 64 loss gradients. Gradient inputs must already be detached.

    frames (B, T, 3, H, W). Returns image (B*T*K, 16, H, W), vector (B*T*K, 128).
    """
    b, t, k = beliefs.state_mean.shape[:3]
    h, w = frames.shape[-2:]
    g_mean, g_vparam, g_rgb, g_logit = grads
    logm = out.log_masks
    comp = normal_logpdf(frames.unsqueeze(2), out.rgb_means,
                         torch.as_tensor(sigma_o ** 2, dtype=frames.dtype)).sum(-3)
    joint = logm + comp
    ll = torch.logsumexp(joint, dim=2, keepdim=True)
    posterior = torch.exp(joint - ll)
    coords = coordinate_channels(h, w, dtype=frames.dtype).expand(b, t, k, 2, h, w)
    image = torch.cat([
        frames.unsqueeze(2).expand(b, t, k, 3, h, w),
        out.rgb_means,
        out.soft_assignments.unsqueeze(3),
        out.mask_logits.unsqueeze(3),
        posterior.unsqueeze(3),
        _layer_norm(ll.expand(b, t, k, h, w), 2).unsqueeze(3),
        _layer_norm(g_rgb, 3),
        _layer_norm(g_logit, 2).unsqueeze(3),
        coords,
    ], dim=3)
    assert image.shape[3] == N_IMAGE_CHANNELS
    vector = torch.cat([beliefs.state_mean, beliefs.state_vparam,
                        _layer_norm(torch.cat([g_mean, g_vparam], dim=-1), 1)], dim=-1)
    return image.reshape(b * t * k, N_IMAGE_CHANNELS, h, w), vector.reshape(b * t * k, -1)


def assemble_action_inputs(beliefs: BeliefSet, grads, expected_action):
    """[mean (2), var-param (2), gradients (4), expected object action (2)] per slot."""
    g = torch.cat(grads, dim=-1)
    g = torch.sign(g) * torch.log1p(g.abs())
    x = torch.cat([beliefs.act_mean, beliefs.act_vparam, g, expected_action], dim=-1)
    return x.reshape(-1, 10)


@dataclass
class InferenceResult:
    beliefs: BeliefSet
    losses: list                 # L^(n) after n = 1..N iterations (tensors)
    breakdowns: list             # per-iteration term dicts
    outputs: DecoderOutput       # decoding of the final belief means
    window_sizes: list = field(default_factory=list)
    mse_history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def predictive_init(model: OBAI, beliefs: BeliefSet) -> BeliefSet:
    """Beliefs for the next frame, extrapolated from the last frame in the window."""
    last = beliefs.frame(beliefs.n_frames - 1)
    mean, var = model.gen.dynamics_predict(last.state_mean, last.state_std ** 2,
                                           last.act_mean, last.act_std ** 2)
    b, _, k, _ = mean.shape
    a0 = model.lambda0_action.expand(b, 1, k, 4)
    return BeliefSet(mean, inv_softplus(var.sqrt()), a0[..., :2], a0[..., 2:])


def _draw(beliefs: BeliefSet, noise: Noise):
    s = beliefs.state_mean + beliefs.state_std * noise.normal(beliefs.state_mean.shape, beliefs.state_mean.dtype)
    a = beliefs.act_mean + beliefs.act_std * noise.normal(beliefs.act_mean.shape, beliefs.act_mean.dtype)
    return s, a


def run_inference(model: OBAI, frames, fields, config: InferenceConfig | None = None, tau: float = 0.5,
                  noise: Noise | None = None, train: bool = False, record: bool = False,
                  n_iters: int | None = None, tape: GradTape | None = None) -> InferenceResult:
    """Infer beliefs for a batch of videos.

    frames (B, F, 3, H, W) in [0, 1]; fields (B, F, H, W, 2). Runs F x
    iters_per_frame iterations; a new frame joins the window every
    iters_per_frame iterations with predictively initialized beliefs. With
    ``train`` the graph is kept for backpropagation through time; otherwise
    beliefs are detached between iterations.
    """
    config = config or InferenceConfig()
    noise = noise or Noise()
    cfg = model.config
    b, n_frames = frames.shape[:2]
    k = cfg.n_slots
    total_iters = n_frames * config.iters_per_frame if n_iters is None else n_iters
    beliefs = model.initial_beliefs(b, 1)
    s_lstm = a_lstm = None
    losses, breakdowns, windows, mses, snaps = [], [], [], [], []

    def evaluate(beliefs, w):
        s, a = _draw(beliefs, noise)
        out = model.decode(s)
        uni = None if config.static else noise.uniform(out.mask_logits.shape, out.mask_logits.dtype)[None]
        lb = elbo(frames[:, :w], fields[:, :w], s, a, beliefs, out, model.gen, config.beta, tau,
                  uniform=uni, static=config.static)
        return out, lb

    def grad_enabled_beliefs(beliefs):
        if train:
            return beliefs
        return beliefs.map(lambda x: x.detach().requires_grad_(True))

    for n in range(total_iters + 1):
        w = beliefs.n_frames
        if 0 < n < total_iters and n % config.iters_per_frame == 0 and w < n_frames:
            beliefs = beliefs.append(predictive_init(model, beliefs))
            s_lstm = _extend_lstm(s_lstm, b, w, k)
            a_lstm = _extend_lstm(a_lstm, b, w, k)
            w += 1
        beliefs = grad_enabled_beliefs(beliefs)
        with torch.enable_grad():
            out, lb = evaluate(beliefs, w)
            loss = lb.total
        if n > 0:
            losses.append(loss if train else loss.detach())
            breakdowns.append(lb.as_dict())
            windows.append(w)
        if record:
            with torch.no_grad():
                recon = model.decode(beliefs.state_mean).reconstruction()
                mses.append(float(((recon - frames[:, :w]) ** 2).mean()))
                snaps.append({"beliefs": beliefs.map(lambda x: x.detach().clone()), "window": w})
        if n == total_iters:
            break
        wrt = beliefs.tensors() + [out.rgb_means, out.mask_logits]

        def loss_grads():
            gs = torch.autograd.grad(loss, wrt, retain_graph=train, allow_unused=True)
            return [torch.zeros_like(x) if g is None else g.detach().clamp(-config.grad_clip, config.grad_clip)
                    for g, x in zip(gs, wrt)]

        grads = tape(n, loss_grads) if tape is not None else loss_grads()
        ctx = torch.enable_grad() if train else torch.no_grad()
        with ctx:
            image, vector = assemble_state_inputs(frames[:, :w], beliefs, out, [grads[0], grads[1], grads[4], grads[5]],
                                                  cfg.sigma_o)
            delta, s_lstm = model.state_refiner(image, vector, s_lstm)
            delta = delta.reshape(b, w, k, -1)
            d = cfg.state_dim
            new = replace(beliefs, state_mean=beliefs.state_mean + delta[..., :d],
                          state_vparam=beliefs.state_vparam + delta[..., d:])
            if not config.static:
                ea = expected_object_action(out.soft_assignments, fields[:, :w])
                a_in = assemble_action_inputs(beliefs, [grads[2], grads[3]], ea)
                da, a_lstm = model.action_refiner(a_in, a_lstm)
                da = da.reshape(b, w, k, 4)
                new = replace(new, act_mean=beliefs.act_mean + da[..., :2],
                              act_vparam=beliefs.act_vparam + da[..., 2:])
            beliefs = new
        if not train:
            beliefs = beliefs.map(lambda x: x.detach())
            s_lstm = tuple(x.detach() for x in s_lstm)
            if a_lstm is not None:
                a_lstm = tuple(x.detach() for x in a_lstm)

    with torch.no_grad():
        final_out = model.decode(beliefs.state_mean)
    if not train:
        beliefs = beliefs.map(lambda x: x.detach())
    return InferenceResult(beliefs, losses, breakdowns, final_out, windows, mses, snaps)


def _extend_lstm(state, b, w, k):
    """Append zero LSTM states for a new frame; states are laid out (B, T, K)."""
    if state is None:
        return None
    h, c = state
    hid = h.shape[-1]

    def ext(x):
        x = x.reshape(b, w, k, hid)
        return torch.cat([x, torch.zeros(b, 1, k, hid, dtype=x.dtype)], dim=1).reshape(-1, hid)

    return ext(h), ext(c)
