"""Train-and-score helpers shared by the ablation command and the acceptance checks."""

from __future__ import annotations

import numpy as np
import torch

from . import metrics
from .training import MDPNet, ModelConfig, TrainConfig, pretrain_autoencoder, rollout, train_end_to_end


def fit(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: np.ndarray):
    """Both training stages from scratch. Returns (model, loss rows)."""
    model = MDPNet(model_cfg)
    _, curve1 = pretrain_autoencoder(model, train_data, train_cfg)
    _, curve2 = train_end_to_end(model, train_data, train_cfg)
    return model, curve1 + curve2


def default_horizon(length: int, stride: int) -> int:
    return ((length - 1) // stride) * stride


def forecast(model: MDPNet, valid: np.ndarray, horizon: int, stride: int, seed: int = 0):
    """Rollout from the first frame of each ``[n, T, C, H, W]`` trajectory.

    Returns (predictions, matching ground-truth frames), both ``[n, horizon // stride, C, H, W]``.
    """
    pred = rollout(model, torch.from_numpy(np.ascontiguousarray(valid[:, 0])), horizon, stride, seed).numpy()
    truth = valid[:, stride:horizon + 1:stride]
    return pred, truth


def score(model: MDPNet, valid: np.ndarray, horizon: int, stride: int, seed: int = 0,
          final_only: bool = False) -> metrics.MetricReport:
    pred, truth = forecast(model, valid, horizon, stride, seed)
    if final_only:
        pred, truth = pred[:, -1:], truth[:, -1:]
    return metrics.evaluate_trajectories(truth, pred)


@torch.no_grad()
def latent_perturbation(model: MDPNet, x: np.ndarray, strengths, scale: int, seed: int = 0,
                        sample_seed: int = 0) -> list[dict]:
    """Perturb ``z^scale`` of encoded snapshots, decode with a fixed sampling seed and re-encode.

    The perturbation is one fixed Gaussian direction per sample, scaled by
    ``strength`` times the per-dimension std of ``z^scale`` over the batch.
    Each row reports, for every scale, the Pearson correlation between the
    re-encoded latents with and without the perturbation (``reencode``) and
    between the perturbed input latent and its re-encoding (``input``).
    """
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    Z = model.encode(xt)
    gen = torch.Generator().manual_seed(seed)
    direction = torch.randn(Z[:, scale - 1].shape, generator=gen)
    spread = Z[:, scale - 1].std(dim=0, unbiased=False)
    reference = model.encode(model.decode(Z, sample_seed))
    rows = []
    for s in strengths:
        Zp = Z.clone()
        Zp[:, scale - 1] = Zp[:, scale - 1] + float(s) * spread * direction
        again = model.encode(model.decode(Zp, sample_seed))
        for k in range(1, Z.shape[1] + 1):
            rows.append({"scale": scale, "strength": float(s), "read_scale": k,
                         "reencode": metrics.pearson(reference[:, k - 1], again[:, k - 1]),
                         "input": metrics.pearson(Zp[:, k - 1], again[:, k - 1])})
    return rows
