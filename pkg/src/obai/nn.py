"""Small differentiable-network substrate on top of torch.

torch supplies the tensors and reverse-mode autodiff; this module adds the
conventions the rest of the package relies on: named layer stacks that report
shape errors by layer, softplus-parameterized Normal beliefs, seeded
truncated-normal initialization, a float64 "shadow" mode for gradient checks,
and a versioned checkpoint format.
"""
from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as tnn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@contextlib.contextmanager
def float64_shadow(enabled: bool = True):
    """Temporarily switch the default dtype to float64."""
    old = torch.get_default_dtype()
    if enabled:
        torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def elu(x):
    return F.elu(x)


def softplus(x):
    return F.softplus(x)


def inv_softplus(y):
    """Inverse of softplus for positive ``y``."""
    y = torch.as_tensor(y)
    return torch.where(y > 20, y, torch.log(torch.expm1(y.clamp_min(1e-12))))


def std_from_param(v):
    """Standard deviation of a Normal belief from its unconstrained parameter."""
    return F.softplus(v)


def reparameterized_normal_sample(mean, var_param, generator: torch.Generator | None = None,
                                  noise=None):
    """Draw ``mean + softplus(var_param) * eps`` with eps ~ N(0, 1).

    Gradients flow to both ``mean`` and ``var_param``. Pass ``noise`` to fix eps.
    """
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + std_from_param(var_param) * noise


def backward(loss: torch.Tensor) -> None:
    """Backpropagate a scalar loss once.

    Raises ``ValueError`` for non-scalar losses and ``RuntimeError`` when the
    same recorded graph is reused.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_obai_consumed", False):
        raise RuntimeError("graph already consumed by backward(); run forward again")
    loss.backward()
    loss._obai_consumed = True


class LayerStack(tnn.Module):
    """Named sequence of layers; shape errors name the failing layer."""

    def __init__(self, layers: list[tuple[str, tnn.Module]]):
        super().__init__()
        self.names = [n for n, _ in layers]
        self.layers = tnn.ModuleDict(layers)

    def forward(self, x):
        for name in self.names:
            try:
                x = self.layers[name](x)
            except RuntimeError as e:
                raise ValueError(f"layer {name!r}: {e}") from e
        return x


class ELU(tnn.Module):
    def forward(self, x):
        return F.elu(x)


def same_conv_transpose(c_in: int, c_out: int, k: int = 5) -> tnn.ConvTranspose2d:
    # stride 1, spatial size preserved
    return tnn.ConvTranspose2d(c_in, c_out, k, stride=1, padding=k // 2)


def truncated_normal_init(module: tnn.Module, seed: int) -> None:
    """Fan-in scaled truncated-normal weights (|z| <= 2), zero biases."""
    g = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters()):
        if p.dim() < 2:
            if name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
            continue
        if isinstance(_owner(module, name), tnn.ConvTranspose2d):
            fan_in = p.shape[0] * p[0, 0].numel()
        else:
            fan_in = p[0].numel()
        std = 1.0 / math.sqrt(fan_in)
        z = torch.randn(p.shape, generator=g, dtype=torch.float64)
        # resample outside [-2, 2]
        bad = z.abs() > 2
        while bad.any():
            z[bad] = torch.randn(int(bad.sum()), generator=g, dtype=torch.float64)
            bad = z.abs() > 2
        with torch.no_grad():
            p.copy_((z * std / 0.8796).to(p.dtype))


def _owner(module: tnn.Module, param_name: str) -> tnn.Module:
    m = module
    for part in param_name.split(".")[:-1]:
        m = getattr(m, part)
    return m


def identity_linear(n: int) -> tnn.Linear:
    layer = tnn.Linear(n, n)
    with torch.no_grad():
        layer.weight.copy_(torch.eye(n))
        layer.bias.zero_()
    return layer


# ----------------------------------------------------------------------------
# checkpoints

def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write a manifest plus one little-endian float32 blob per named tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (name, t) in enumerate(sorted(tensors.items())):
        arr = t.detach().cpu().numpy().astype("<f4")
        fname = f"t{i:04d}.f32"
        (root / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"version": CHECKPOINT_VERSION, "tensors": entries, "meta": meta or {}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"corrupt checkpoint {root}: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{root}: unsupported checkpoint version {manifest.get('version')}")
    out = {}
    for name, e in manifest["tensors"].items():
        raw = (root / e["file"]).read_bytes()
        shape = tuple(e["shape"])
        if len(raw) != 4 * int(np.prod(shape)):
            raise ValueError(f"{root}: blob for {name!r} has wrong size")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out, manifest.get("meta", {})


class ParamStore:
    """Named parameter tensors of a module with checkpoint round-tripping."""

    def __init__(self, module: tnn.Module):
        self.module = module

    def names(self) -> list[str]:
        return [n for n, _ in self.module.named_parameters()]

    def save(self, path, meta: dict | None = None) -> None:
        save_tensors(path, dict(self.module.state_dict()), meta)

    def load(self, path) -> dict:
        tensors, meta = load_tensors(path)
        state = self.module.state_dict()
        missing = set(state) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
        self.module.load_state_dict({k: v.to(state[k].dtype) for k, v in tensors.items() if k in state})
        return meta
