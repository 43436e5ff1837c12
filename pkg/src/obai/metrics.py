"""Segmentation and reconstruction metrics."""
from __future__ import annotations

import numpy as np


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred_masks, true_masks, foreground_only: bool = False) -> float:
    """Adjusted Rand index between two pixel labelings.

    Labels are pooled over every pixel given (e.g. all frames of a video).
    With ``foreground_only`` only pixels whose true label is non-zero count.
    Two identical single-cluster partitions score 1.
    """
    pred = np.asarray(pred_masks).reshape(-1)
    true = np.asarray(true_masks).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if foreground_only:
        keep = true > 0
        pred, true = pred[keep], true[keep]
    n = pred.size
    if n < 2:
        return 1.0
    _, p_idx = np.unique(pred, return_inverse=True)
    _, t_idx = np.unique(true, return_inverse=True)
    table = np.zeros((p_idx.max() + 1, t_idx.max() + 1))
    np.add.at(table, (p_idx, t_idx), 1)
    sum_comb = _comb2(table).sum()
    a = _comb2(table.sum(1)).sum()
    b = _comb2(table.sum(0)).sum()
    expected = a * b / _comb2(n)
    max_index = (a + b) / 2.0
    if max_index == expected:
        # both partitions trivial (single cluster or all singletons)
        return 1.0 if sum_comb == max_index else 0.0
    return float((sum_comb - expected) / (max_index - expected))


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def mask_centroids(masks) -> np.ndarray:
    """(..., K, H, W) soft or hard masks -> (..., K, 2) mass-weighted (x, y)."""
    m = np.asarray(masks, dtype=np.float64)
    h, w = m.shape[-2:]
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    mass = m.sum(axis=(-2, -1))
    cx = (m * xs).sum(axis=(-2, -1)) / np.maximum(mass, 1e-12)
    cy = (m * ys).sum(axis=(-2, -1)) / np.maximum(mass, 1e-12)
    return np.stack([cx, cy], axis=-1)
