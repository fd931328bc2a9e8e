"""NMSE, global SSIM, Pearson correlation and their aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C1 = 0.01 ** 2
C2 = 0.03 ** 2


class ShapeMismatch(ValueError):
    pass


def nmse(truth, prediction) -> float:
    y = np.asarray(truth, dtype=np.float64)
    yh = np.asarray(prediction, dtype=np.float64)
    if y.shape != yh.shape:
        raise ShapeMismatch(f"shape mismatch {y.shape} vs {yh.shape}")
    denom = np.sum(y * y)
    if denom == 0:
        raise ValueError("NMSE undefined for an all-zero ground truth")
    return float(np.sum((y - yh) ** 2) / denom)


def ssim(x, y) -> float:
    """Non-windowed SSIM per channel of ``[C, H, W]`` (or ``[H, W]``) fields, averaged over channels.

    Population moments; data range taken as 1.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    mx, my = a.mean(axis=1), b.mean(axis=1)
    vx, vy = a.var(axis=1), b.var(axis=1)
    cov = ((a - mx[:, None]) * (b - my[:, None])).mean(axis=1)
    per_channel = ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2))
    return float(per_channel.mean())


def pearson(a, b) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length inputs of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise ValueError("pearson undefined for a constant input")
    return float(np.sum(xc * yc) / (sx * sy))


@dataclass
class MetricReport:
    nmse: np.ndarray        # [n_traj, T]
    ssim: np.ndarray
    nmse_mean: float
    nmse_std: float
    ssim_mean: float
    ssim_std: float


def aggregate(values) -> tuple[float, float]:
    """Mean and population std over all entries (time x trajectory pooled)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    return float(v.mean()), float(v.std())


def evaluate_trajectories(truth, prediction) -> MetricReport:
    """Per-snapshot metrics for ``[n, T, C, H, W]`` arrays."""
    truth = np.asarray(truth)
    prediction = np.asarray(prediction)
    if truth.shape != prediction.shape:
        raise ShapeMismatch(f"shape mismatch {truth.shape} vs {prediction.shape}")
    n, T = truth.shape[:2]
    e = np.array([[nmse(truth[i, t], prediction[i, t]) for t in range(T)] for i in range(n)])
    s = np.array([[ssim(truth[i, t], prediction[i, t]) for t in range(T)] for i in range(n)])
    return MetricReport(e, s, *aggregate(e), *aggregate(s))
