"""Active-dSprites: a seedable multi-object 2-D environment with action fields.

Objects are flat sprites (square, ellipse, heart) that move linearly and are
accelerated by sparse per-pixel action fields. Each object receives the sum of
the accelerations placed on its visible pixels.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("square", "ellipse", "heart")
COLOR_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
SUPERSAMPLE = 4
FORMAT_VERSION = 1
MAGIC = b"ADSP1"
HEADER_SIZE = 64
STATE_FIELDS = 10  # shape, size, r, g, b, x, y, vx, vy, depth_rank


@dataclass
class ObjectSpec:
    shape: str
    size: float
    color: tuple[float, float, float]
    position: np.ndarray  # (x, y) in pixels, continuous
    velocity: np.ndarray  # (x, y) in pixels / frame
    depth_rank: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.size <= 0:
            raise ValueError("size must be positive")
        if any(c < 0 or c > 1 for c in self.color):
            raise ValueError("color components must lie in [0, 1]")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)


@dataclass
class EnvState:
    objects: list[ObjectSpec]
    background_gray: float
    frame_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        ranks = sorted(o.depth_rank for o in self.objects)
        if ranks != list(range(len(self.objects))):
            raise ValueError("depth ranks must be a permutation of 0..N-1")

    def copy(self) -> "EnvState":
        objs = [dataclasses.replace(o, position=o.position.copy(), velocity=o.velocity.copy())
                for o in self.objects]
        return EnvState(objs, self.background_gray, self.frame_size)


@dataclass
class EnvConfig:
    """Sampling ranges for scenes and actions.

    The defaults are the 64x64 setting; ``scaled`` derives a proportionally
    smaller environment (sizes, velocities and accelerations scale with width).
    """
    frame_size: tuple[int, int] = (64, 64)
    n_objects: int = 3
    size_range: tuple[float, float] = (12.0, 25.0)
    velocity_sd: float = 4.0
    accel_sd: float = 4.0
    color_levels: tuple[float, ...] = COLOR_LEVELS
    background_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        h, w = self.frame_size
        if h < 8 or w < 8:
            raise ValueError(f"frame size {self.frame_size} too small (min 8x8)")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")

    @classmethod
    def scaled(cls, frame_size: int, n_objects: int = 3) -> "EnvConfig":
        f = frame_size / 64.0
        return cls(frame_size=(frame_size, frame_size), n_objects=n_objects,
                   size_range=(12.0 * f, 25.0 * f), velocity_sd=4.0 * f, accel_sd=4.0 * f)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the substream ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def sample_scene(rng: np.random.Generator, n_objects: int = 3, frame_size=(64, 64),
                 config: EnvConfig | None = None) -> EnvState:
    if config is None:
        config = EnvConfig(frame_size=tuple(frame_size), n_objects=n_objects)
    h, w = config.frame_size
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    depth = rng.permutation(n_objects)
    levels = np.asarray(config.color_levels)
    objects = []
    for k in range(n_objects):
        shape = SHAPES[rng.integers(len(SHAPES))]
        size = rng.uniform(*config.size_range)
        color = tuple(float(c) for c in rng.choice(levels, size=3))
        pos = np.array([rng.uniform(0, w), rng.uniform(0, h)])
        vel = rng.normal(0.0, config.velocity_sd, size=2)
        objects.append(ObjectSpec(shape, float(size), color, pos, vel, int(depth[k])))
    bg = float(rng.uniform(*config.background_range))
    return EnvState(objects, bg, (h, w))


def _coverage(obj: ObjectSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean inside-test of a sprite at sample coordinates."""
    dx = xs - obj.position[0]
    dy = ys - obj.position[1]
    half = obj.size / 2.0
    if obj.shape == "square":
        return (np.abs(dx) < half) & (np.abs(dy) < half)
    if obj.shape == "ellipse":
        return (dx / half) ** 2 + (dy / (0.6 * half)) ** 2 <= 1.0
    # heart: (u^2 + v^2 - 1)^3 - u^2 v^3 <= 0, spanning roughly [-1.14, 1.14] x [-1, 1.25]
    scale = obj.size / 2.5
    u = dx / scale
    v = -(dy / scale) + 0.1  # image y points down; recentre vertically
    return (u * u + v * v - 1.0) ** 3 - u * u * v ** 3 <= 0.0


def _sample_grid(h: int, w: int):
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    return np.meshgrid(xs, ys)  # each (h*S, w*S)


def object_masks(state: EnvState) -> np.ndarray:
    """Per-object hard coverage masks (N, H, W), ignoring occlusion."""
    h, w = state.frame_size
    xs, ys = _sample_grid(h, w)
    out = np.zeros((len(state.objects), h, w), dtype=bool)
    for k, obj in enumerate(state.objects):
        inside = _coverage(obj, xs, ys).reshape(h, SUPERSAMPLE, w, SUPERSAMPLE)
        out[k] = inside.mean(axis=(1, 3)) >= 0.5
    return out


def render(state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a scene with occlusion.

    Each pixel is supersampled 4x4; an object covers the pixel when at least
    half of the subsamples fall inside it. The nearest covering object (lowest
    depth rank) owns the pixel.

    Returns ``(frame, mask)``: an (H, W, 3) float32 image and an (H, W) int32
    map holding 0 for background and k + 1 for object k.
    """
    h, w = state.frame_size
    frame = np.full((h, w, 3), state.background_gray, dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.int32)
    cover = object_masks(state)
    # paint far to near so nearer objects overwrite
    for k in sorted(range(len(state.objects)), key=lambda j: -state.objects[j].depth_rank):
        m = cover[k]
        frame[m] = np.asarray(state.objects[k].color, dtype=np.float32)
        mask[m] = k + 1
    return frame, mask


def sample_action_field(state: EnvState, masks: np.ndarray, rng: np.random.Generator,
                        accel_sd: float = 4.0, info: dict | None = None) -> np.ndarray:
    """Sparse action field: one Normal(0, sd^2) acceleration per visible object
    at one of its visible pixels, plus one at a background pixel.

    Fully occluded (or off-frame) objects get nothing; their indices are
    appended to ``info["unreachable"]`` when ``info`` is given.
    """
    h, w = masks.shape
    accels = np.zeros((h, w, 2), dtype=np.float64)
    flat = masks.reshape(-1)
    for label in range(len(state.objects) + 1):
        idx = np.flatnonzero(flat == label)
        if idx.size == 0:
            if label > 0 and info is not None:
                info.setdefault("unreachable", []).append(label - 1)
            continue
        i = idx[rng.integers(idx.size)]
        accels[i // w, i % w] = rng.normal(0.0, accel_sd, size=2)
    return accels


def object_action_from_field(field: np.ndarray, masks: np.ndarray, k: int) -> np.ndarray:
    """Sum of accelerations on the visible pixels of object ``k`` (0-based)."""
    return field[masks == k + 1].sum(axis=0)


def step(state: EnvState, field: np.ndarray | None, masks: np.ndarray | None) -> EnvState:
    """Advance one frame: velocity += object action, then position += velocity."""
    new = state.copy()
    for k, obj in enumerate(new.objects):
        if field is not None:
            obj.velocity = obj.velocity + object_action_from_field(field, masks, k)
        obj.position = obj.position + obj.velocity
    return new


@dataclass
class VideoRecord:
    frames: np.ndarray         # (F, H, W, 3) float32
    true_masks: np.ndarray     # (F, H, W) int32
    action_fields: np.ndarray  # (F, H, W, 2) float32
    true_states: np.ndarray    # (F, 1 + 10 N) float32
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def state_to_array(state: EnvState) -> np.ndarray:
    row = [state.background_gray]
    for o in state.objects:
        row += [SHAPES.index(o.shape), o.size, *o.color, *o.position, *o.velocity, o.depth_rank]
    return np.asarray(row, dtype=np.float32)


def array_to_state(row: np.ndarray, frame_size) -> EnvState:
    n = (len(row) - 1) // STATE_FIELDS
    objs = []
    for k in range(n):
        r = row[1 + k * STATE_FIELDS: 1 + (k + 1) * STATE_FIELDS].astype(np.float64)
        objs.append(ObjectSpec(SHAPES[int(r[0])], float(r[1]), tuple(float(c) for c in r[2:5]),
                               r[5:7], r[7:9], int(r[9])))
    return EnvState(objs, float(row[0]), tuple(frame_size))


def simulate_video(rng: np.random.Generator, config: EnvConfig, n_frames: int,
                   action_frame: int | None = 1, state: EnvState | None = None) -> VideoRecord:
    """Roll out one video; an action field is applied only at ``action_frame``."""
    if state is None:
        state = sample_scene(rng, config.n_objects, config.frame_size, config)
    h, w = config.frame_size
    frames, masks, fields, states = [], [], [], []
    meta: dict = {}
    for t in range(n_frames):
        frame, mask = render(state)
        if t == action_frame:
            info: dict = {}
            psi = sample_action_field(state, mask, rng, config.accel_sd, info)
            if info.get("unreachable"):
                meta["unreachable"] = info["unreachable"]
        else:
            psi = np.zeros((h, w, 2))
        frames.append(frame)
        masks.append(mask)
        fields.append(psi.astype(np.float32))
        states.append(state_to_array(state))
        state = step(state, psi, mask)
    return VideoRecord(np.stack(frames), np.stack(masks), np.stack(fields), np.stack(states), meta=meta)


# ----------------------------------------------------------------------------
# binary record format

def write_record(path, rec: VideoRecord) -> None:
    f, h, w, _ = rec.frames.shape
    n = (rec.true_states.shape[1] - 1) // STATE_FIELDS
    sections = [
        np.ascontiguousarray(rec.frames, dtype="<f4").tobytes(),
        np.ascontiguousarray(rec.true_masks, dtype="<i4").tobytes(),
        np.ascontiguousarray(rec.action_fields, dtype="<f4").tobytes(),
        np.ascontiguousarray(rec.true_states, dtype="<f4").tobytes(),
    ]
    offsets, pos = [], HEADER_SIZE
    for s in sections:
        offsets.append(pos)
        pos += len(s)
    header = struct.pack("<8s4i4Q8x", MAGIC, f, h, w, n, *offsets)
    assert len(header) == HEADER_SIZE
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            for s in sections:
                fh.write(s)
    except OSError as e:
        raise OSError(f"failed to write record {path}: {e}") from e


def read_record(path) -> VideoRecord:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"failed to read record {path}: {e}") from e
    if len(data) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated record")
    magic, f, h, w, n, o_fr, o_m, o_a, o_s = struct.unpack("<8s4i4Q8x", data[:HEADER_SIZE])
    if magic.rstrip(b"\0") != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    ns = 1 + STATE_FIELDS * n

    def sect(off, dtype, shape):
        count = int(np.prod(shape))
        return np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape).copy()

    return VideoRecord(
        frames=sect(o_fr, "<f4", (f, h, w, 3)).astype(np.float32),
        true_masks=sect(o_m, "<i4", (f, h, w)).astype(np.int32),
        action_fields=sect(o_a, "<f4", (f, h, w, 2)).astype(np.float32),
        true_states=sect(o_s, "<f4", (f, ns)).astype(np.float32),
    )


@dataclass
class DatasetConfig:
    n_videos: int = 100
    n_frames: int = 4
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    action_frame: int = 1


def generate_dataset(config: DatasetConfig, out_path, export_png: bool = False) -> dict:
    """Write ``config.n_videos`` records plus ``manifest.json`` into ``out_path``."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    action_frame = config.action_frame if config.n_frames > 1 else None
    files, metas = [], {}
    for i in range(config.n_videos):
        rng = make_rng(config.seed, i)
        rec = simulate_video(rng, config.env, config.n_frames, action_frame)
        name = f"video_{i:06d}.adsp"
        write_record(out / name, rec)
        files.append(name)
        if rec.meta:
            metas[name] = rec.meta
        if export_png:
            from .viz import save_record_png
            save_record_png(rec, out / f"video_{i:06d}.png")
    manifest = {
        "format": "active-dsprites",
        "version": FORMAT_VERSION,
        "config": {
            "n_videos": config.n_videos, "n_frames": config.n_frames, "seed": config.seed,
            "action_frame": action_frame, **_env_dict(config.env),
        },
        "sampling": {
            "position": "uniform [0, W) x [0, H)",
            "size_range": list(config.env.size_range),
            "color_levels": list(config.env.color_levels),
            "background": list(config.env.background_range),
            "velocity_sd": config.env.velocity_sd,
            "accel_sd": config.env.accel_sd,
            "prng": "numpy Philox, SeedSequence([seed, video_index])",
            "rasterization": f"{SUPERSAMPLE}x{SUPERSAMPLE} supersampling, coverage >= 0.5",
        },
        "videos": [{"file": f, "seed": [config.seed, i]} for i, f in enumerate(files)],
        "record_meta": metas,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    log.info("wrote %d videos to %s", config.n_videos, out)
    return manifest


def _env_dict(env: EnvConfig) -> dict:
    d = dataclasses.asdict(env)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    try:
        manifest = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"invalid dataset manifest {p}: {e}") from e
    if manifest.get("format") != "active-dsprites":
        raise ValueError(f"{p}: not an active-dsprites manifest")
    return manifest


def env_config_from_manifest(manifest: dict) -> EnvConfig:
    c = manifest["config"]
    return EnvConfig(frame_size=tuple(c["frame_size"]), n_objects=c["n_objects"],
                     size_range=tuple(c["size_range"]), velocity_sd=c["velocity_sd"],
                     accel_sd=c["accel_sd"], color_levels=tuple(c["color_levels"]),
                     background_range=tuple(c["background_range"]))


def load_dataset(path, limit: int | None = None) -> list[VideoRecord]:
    manifest = load_manifest(path)
    entries = manifest["videos"][:limit] if limit else manifest["videos"]
    recs = []
    for e in entries:
        rec = read_record(os.path.join(path, e["file"]))
        rec.seed = int(e["seed"][1])
        recs.append(rec)
    return recs
