"""PNG figures: dataset previews, segmentation grids, rollouts and plans."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

PALETTE = np.array([
    [0.15, 0.15, 0.15], [0.90, 0.30, 0.25], [0.25, 0.65, 0.90], [0.95, 0.80, 0.20],
    [0.45, 0.80, 0.35], [0.75, 0.40, 0.85], [0.95, 0.55, 0.15], [0.55, 0.55, 0.55],
])
PAD = 2


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def label_image(labels) -> np.ndarray:
    """Integer label map (H, W) -> palette colours."""
    lab = np.asarray(labels, dtype=np.int64)
    return PALETTE[lab % len(PALETTE)]


def grid(rows, scale: int = 4) -> Image.Image:
    """Tile a list of rows of (H, W, 3) or (H, W) images in [0, 1]."""
    rows = [[to_uint8(c) for c in r] for r in rows]
    h = max(c.shape[0] for r in rows for c in r)
    w = max(c.shape[1] for r in rows for c in r)
    n_cols = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + PAD) + PAD, n_cols * (w + PAD) + PAD, 3), 255, dtype=np.uint8)
    for i, r in enumerate(rows):
        for j, c in enumerate(r):
            y, x = PAD + i * (h + PAD), PAD + j * (w + PAD)
            canvas[y:y + c.shape[0], x:x + c.shape[1]] = c
    im = Image.fromarray(canvas)
    return im.resize((im.width * scale, im.height * scale), Image.NEAREST)


def save(im: Image.Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path)
    return path


def save_record_png(record, path, scale: int = 4) -> Path:
    """Frames on top, ground-truth masks below, action-field magnitude last."""
    mag = np.linalg.norm(record.action_fields, axis=-1)
    top = mag.max() if mag.max() > 0 else 1.0
    rows = [list(record.frames), [label_image(m) for m in record.true_masks], [m / top for m in mag]]
    return save(grid(rows, scale), path)


def segmentation_figure(frames, recon, soft_masks, slot_rgb, true_masks=None, scale: int = 4) -> Image.Image:
    """Frames, reconstructions, argmax masks and per-slot masked reconstructions.

    frames/recon (T, H, W, 3); soft_masks (T, K, H, W); slot_rgb (T, K, H, W, 3).
    """
    t, k = soft_masks.shape[:2]
    rows = [list(frames), list(recon), [label_image(m.argmax(0)) for m in soft_masks]]
    if true_masks is not None:
        rows.append([label_image(m) for m in true_masks])
    for j in range(k):
        rows.append([slot_rgb[i, j] * soft_masks[i, j, ..., None] + (1 - soft_masks[i, j, ..., None])
                     for i in range(t)])
    return grid(rows, scale)


def prediction_figure(observed, predicted, truth, scale: int = 4) -> Image.Image:
    """Observed frames then predicted frames (top) against the true future (bottom)."""
    blank = np.ones_like(observed[0])
    top = list(observed) + list(predicted)
    bottom = [blank] * len(observed) + list(truth)
    return grid([top, bottom], scale)


def field_image(field, scale: int = 8, base=None) -> Image.Image:
    """Arrows from every non-zero pixel of an (H, W, 2) action field."""
    h, w = field.shape[:2]
    bg = to_uint8(base if base is not None else np.ones((h, w, 3)) * 0.9)
    im = Image.fromarray(bg).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    mags = np.linalg.norm(field, axis=-1)
    norm = mags.max() if mags.max() > 0 else 1.0
    for y, x in zip(*np.nonzero(mags)):
        cx, cy = (x + 0.5) * scale, (y + 0.5) * scale
        dx, dy = field[y, x] / norm * 3 * scale
        draw.line([(cx, cy), (cx + dx, cy + dy)], fill=(200, 0, 0), width=2)
        draw.ellipse([cx - 2, cy - 2, cx + 2, cy + 2], fill=(200, 0, 0))
    return im


def plan_figure(frame, soft_masks, field, imagined, scale: int = 8) -> Image.Image:
    """Input, inferred masks, action field and imagined next frame side by side."""
    left = grid([[frame, label_image(soft_masks.argmax(0))]], scale)
    arrows = field_image(field, scale, base=frame)
    right = grid([[imagined]], scale)
    out = Image.new("RGB", (left.width + arrows.width + right.width + 2 * PAD * scale,
                            max(left.height, arrows.height + 2 * PAD * scale, right.height)), "white")
    out.paste(left, (0, 0))
    out.paste(arrows, (left.width + PAD * scale, PAD * scale))
    out.paste(right, (left.width + arrows.width + 2 * PAD * scale, 0))
    return out


def dump_inference(result, frames, model, out_dir) -> Path:
    """Per-iteration belief tensors plus reconstruction/mask PNGs for one batch.

    ``result`` must come from ``run_inference(..., record=True)``.
    """
    import torch

    from .nn import save_tensors

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fr = frames[0].permute(0, 2, 3, 1).numpy()
    for i, snap in enumerate(result.snapshots):
        bel = snap["beliefs"]
        w = snap["window"]
        save_tensors(out / f"iter{i:03d}", {"state_mean": bel.state_mean, "state_vparam": bel.state_vparam,
                                            "act_mean": bel.act_mean, "act_vparam": bel.act_vparam},
                     {"iteration": i, "window": w, "mse": result.mse_history[i]})
        with torch.no_grad():
            dec = model.decode(bel.state_mean[:1])
        m = dec.soft_assignments[0].numpy()
        rec = dec.reconstruction()[0].permute(0, 2, 3, 1).numpy()
        rgb = dec.rgb_means[0].permute(0, 1, 3, 4, 2).numpy()
        save(segmentation_figure(fr[:w], rec, m, rgb), out / f"iter{i:03d}.png")
    return out
