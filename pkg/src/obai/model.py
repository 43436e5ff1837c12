"""Object-structured generative model.

Each of K slots holds generalized-coordinate latents ``s_dag = [s, s']``. A
shared spatial-broadcast decoder maps ``s`` (never ``s'``) to per-pixel RGB
means and a mask logit; the image likelihood is a softmax-weighted mixture of
isotropic Normals. Latents evolve with action-driven linear dynamics:

    s'_t = s'_{t-1} + D a_{t-1} + noise
    s_t  = s_{t-1} + s'_t      + noise
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as tnn
import torch.nn.functional as F

from .nn import ELU, LayerStack, same_conv_transpose, truncated_normal_init

LOG_2PI = math.log(2 * math.pi)


@dataclass
class ModelConfig:
    latent_dim: int = 16
    n_slots: int = 4
    frame_size: tuple[int, int] = (64, 64)
    decoder_channels: int = 32
    decoder_layers: int = 4
    kernel: int = 5
    sigma_o: float = 0.3
    sigma_s: float = 0.1
    sigma_psi: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_o, self.sigma_s, self.sigma_psi) <= 0:
            raise ValueError("noise standard deviations must be positive")
        if self.n_slots < 1:
            raise ValueError("need at least one slot")

    @property
    def state_dim(self) -> int:
        return 2 * self.latent_dim


@dataclass
class DecoderOutput:
    """Decoded slots. Shapes: rgb_means (..., K, 3, H, W); logits and
    soft_assignments (..., K, H, W)."""
    rgb_means: torch.Tensor
    mask_logits: torch.Tensor

    @property
    def log_masks(self) -> torch.Tensor:
        return torch.log_softmax(self.mask_logits, dim=-3)

    @property
    def soft_assignments(self) -> torch.Tensor:
        return torch.softmax(self.mask_logits, dim=-3)

    def reconstruction(self) -> torch.Tensor:
        return (self.soft_assignments.unsqueeze(-3) * self.rgb_means).sum(dim=-4)


def coordinate_channels(h: int, w: int, dtype=None) -> torch.Tensor:
    """(2, H, W) grid of x and y coordinates in [-1, 1]."""
    ys = torch.linspace(-1, 1, h, dtype=dtype)
    xs = torch.linspace(-1, 1, w, dtype=dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy])


class BroadcastDecoder(tnn.Module):
    """Spatial broadcast decoder, one weight set shared by every slot."""

    def __init__(self, latent_dim: int, frame_size, channels: int = 32, n_layers: int = 4, kernel: int = 5):
        super().__init__()
        self.frame_size = tuple(frame_size)
        layers = []
        c_in = latent_dim + 2
        for i in range(n_layers):
            layers += [(f"convT{i}", same_conv_transpose(c_in, channels, kernel)), (f"elu{i}", ELU())]
            c_in = channels
        layers.append(("out", same_conv_transpose(c_in, 4, kernel)))
        self.net = LayerStack(layers)

    def forward(self, s: torch.Tensor):
        lead = s.shape[:-1]
        h, w = self.frame_size
        flat = s.reshape(-1, s.shape[-1])
        grid = flat[:, :, None, None].expand(-1, -1, h, w)
        coords = coordinate_channels(h, w, dtype=s.dtype).expand(flat.shape[0], -1, -1, -1)
        out = self.net(torch.cat([grid, coords], dim=1))
        out = out.reshape(*lead, 4, h, w)
        return out[..., :3, :, :], out[..., 3, :, :]


class GenerativeModel(tnn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.decoder = BroadcastDecoder(config.latent_dim, config.frame_size, config.decoder_channels,
                                        config.decoder_layers, config.kernel)
        # acts on the s' block only
        self.D = tnn.Parameter(torch.zeros(config.latent_dim, 2))
        truncated_normal_init(self.decoder, config.seed)
        g = torch.Generator().manual_seed(config.seed + 1)
        with torch.no_grad():
            self.D.copy_(0.1 * torch.randn(config.latent_dim, 2, generator=g))

    def decode(self, latents: torch.Tensor) -> DecoderOutput:
        """Decode (..., K, 2*latent_dim) generalized latents or (..., K, latent_dim) states."""
        s = latents[..., : self.config.latent_dim]
        rgb, logits = self.decoder(s)
        return DecoderOutput(rgb, logits)

    def dynamics_predict(self, mean, var, a_mean, a_var, sigma_s: float | None = None):
        sigma_s = self.config.sigma_s if sigma_s is None else sigma_s
        return dynamics_predict(mean, var, a_mean, a_var, self.D, sigma_s)


def decode(model: GenerativeModel, latents: torch.Tensor) -> DecoderOutput:
    return model.decode(latents)


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + torch.log(var) + (x - mean) ** 2 / var)


def pixel_log_likelihood(frame: torch.Tensor, out: DecoderOutput, sigma_o: float,
                         reduce: bool = False) -> torch.Tensor:
    """log sum_k m_k N(o_i; mu_ik, sigma_o^2 I) per pixel.

    ``frame`` is (..., 3, H, W); result (..., H, W) or its sum when ``reduce``.
    """
    var = torch.as_tensor(sigma_o ** 2, dtype=out.rgb_means.dtype)
    comp = normal_logpdf(frame.unsqueeze(-4), out.rgb_means, var).sum(dim=-3)
    ll = torch.logsumexp(out.log_masks + comp, dim=-3)
    return ll.sum(dim=(-2, -1)) if reduce else ll


def dynamics_predict(mean, var, a_mean, a_var, D, sigma_s: float):
    """Push a diagonal Normal over ``[s, s']`` through one dynamics step.

    Returns diagonal (marginal) mean and variance of the next ``[s, s']``;
    the s/s' cross-covariance created by the step is not carried.
    """
    d = D.shape[0]
    s, sp = mean[..., :d], mean[..., d:]
    vs, vsp = var[..., :d], var[..., d:]
    sp_new = sp + a_mean @ D.T
    s_new = s + sp_new
    vsp_new = vsp + a_var @ (D.T ** 2) + sigma_s ** 2
    vs_new = vs + vsp_new + sigma_s ** 2
    return torch.cat([s_new, sp_new], dim=-1), torch.cat([vs_new, vsp_new], dim=-1)


def dynamics_log_prob(s_next, s_prev, a_prev, D, sigma_s: float):
    """log p(s_dag_t | s_dag_{t-1}, a_{t-1}) summed over latent dimensions."""
    d = D.shape[0]
    var = torch.as_tensor(sigma_s ** 2, dtype=s_next.dtype)
    sp_mean = s_prev[..., d:] + a_prev @ D.T
    lp = normal_logpdf(s_next[..., d:], sp_mean, var).sum(-1)
    lp = lp + normal_logpdf(s_next[..., :d], s_prev[..., :d] + s_next[..., d:], var).sum(-1)
    return lp


def initial_prior(state_dim: int = 32, dtype=None):
    """Standard Normal over the generalized coordinates of one slot."""
    return torch.zeros(state_dim, dtype=dtype), torch.ones(state_dim, dtype=dtype)


def prior_log_prob(x):
    return (-0.5 * (LOG_2PI + x ** 2)).sum(-1)


def expected_object_action(masks: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """sum_i m_ik psi_i. masks (..., K, H, W), field (..., H, W, 2) -> (..., K, 2)."""
    return torch.einsum("...khw,...hwc->...kc", masks, field)
