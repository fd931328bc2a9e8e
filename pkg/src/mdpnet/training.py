"""The full model, two-stage training, latent rollout and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import data_io
from . import tensor_core as tc
from .diffusion import (ConditionalUNet, default_beta_range, latent_loss, make_schedule,
                        make_stage_schedule, reverse_sample)
from .gnode import GNODE, ODESolverConfig, integrate, pred_loss
from .multiscale import ScaleAwareEncoder

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    channels: int = 2
    height: int = 32
    width: int = 32
    n_scales: int = 3
    latent_dim: int = 16
    diffusion_steps: int = 100
    beta_start: float | None = None     # None: default_beta_range(diffusion_steps)
    beta_end: float | None = None
    allocation: tuple = ()              # stage weights fine->coarse; empty = uniform
    stage_mode: str = "global"
    scale_progression: str = "linear"
    encoder_hidden: int = 32
    unet_widths: tuple = (16, 32, 32)
    gnode_hidden: int = 32
    interaction: bool = True
    solver: str = "rk4"
    solver_step: float = 0.25
    data_low: float = 0.0          # normalized data range, mapped to [-1, 1] inside the model
    data_high: float = 1.0
    clip: bool = True              # keep the implied clean sample inside the data range while decoding
    seed: int = 0


@dataclass
class TrainConfig:
    pretrain_epochs: int = 50
    e2e_epochs: int = 50
    batch_size: int = 18
    lr: float = 1e-4
    interval: int = 5           # snapshot steps per unit of latent time
    max_intervals: int = 2      # future targets at interval * j, j = 1..max_intervals
    pred_weight: float = 1.0
    pred_to_encoder: bool = False   # let L_pred reach the encoder (shrinks the latents, see e2e_losses)
    seed: int = 0
    train_noise: float = 0.0    # relative gaussian noise added to training snapshots
    max_batches_per_epoch: int = 0   # 0: full pass


class MDPNet(torch.nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ScaleAwareEncoder(cfg.channels, cfg.height, cfg.width, cfg.latent_dim, cfg.n_scales,
                                         hidden=cfg.encoder_hidden, progression=cfg.scale_progression)
        self.unet = ConditionalUNet(cfg.channels, cfg.latent_dim, widths=tuple(cfg.unet_widths))
        self.gnode = GNODE(cfg.latent_dim, cfg.n_scales, hidden=cfg.gnode_hidden, interaction=cfg.interaction)
        lo, hi = default_beta_range(cfg.diffusion_steps)
        self.schedule = make_schedule(cfg.diffusion_steps,
                                      lo if cfg.beta_start is None else cfg.beta_start,
                                      hi if cfg.beta_end is None else cfg.beta_end)
        self.stages = make_stage_schedule(cfg.diffusion_steps, cfg.n_scales, cfg.allocation or None,
                                          cfg.stage_mode)
        self.solver = ODESolverConfig(method=cfg.solver, step_size=cfg.solver_step)
        tc.init_module_(self, cfg.seed)

    @property
    def autoencoder_params(self) -> list[torch.nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.unet.parameters())

    def to_internal(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.cfg.data_low, self.cfg.data_high
        return (2.0 * x - (lo + hi)) / (hi - lo)

    def from_internal(self, y: torch.Tensor) -> torch.Tensor:
        lo, hi = self.cfg.data_low, self.cfg.data_high
        return (y * (hi - lo) + (lo + hi)) / 2.0

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder.encode_all(self.to_internal(x))

    def decode(self, Z: torch.Tensor, seed: int = 0) -> torch.Tensor:
        shape = (self.cfg.channels, self.cfg.height, self.cfg.width)
        y = reverse_sample(self.unet, Z, shape, self.schedule, self.stages, seed=seed,
                           clip=(-1.0, 1.0) if self.cfg.clip else None)
        return self.from_internal(y)

    def predict_latents(self, Z0: torch.Tensor, times) -> torch.Tensor:
        return integrate(self.gnode, Z0, times, self.solver)

    def latent_loss(self, x, generator, latents=None):
        return latent_loss(self.encoder, self.unet, self.to_internal(x), self.schedule, self.stages,
                           generator, latents)


def flat_params(model: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def _snapshots(data: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(data.reshape(-1, *data.shape[-3:]), dtype=np.float32))


def _noisy(x: torch.Tensor, strength: float, channel_std: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    if strength <= 0:
        return x
    return x + strength * channel_std[:, None, None] * torch.randn(x.shape, generator=gen, dtype=x.dtype)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{stage} loss diverged (non-finite) in epoch {epoch}")


def pretrain_autoencoder(model: MDPNet, data: np.ndarray, cfg: TrainConfig, state: tc.AdamState | None = None):
    """Stage 1: minimize the latent denoising loss over snapshots; the predictor is not touched.

    ``data`` is ``[n, T, C, H, W]``. Returns (optimizer state, per-epoch loss rows).
    """
    params = model.autoencoder_params
    state = state or tc.AdamState.for_params(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    snaps = _snapshots(data)
    channel_std = snaps.std(dim=(0, 2, 3))
    curve = []
    for epoch in range(cfg.pretrain_epochs):
        perm = torch.randperm(snaps.shape[0], generator=gen)
        batches = list(torch.split(perm, cfg.batch_size))
        if cfg.max_batches_per_epoch:
            batches = batches[:cfg.max_batches_per_epoch]
        total = 0.0
        for idx in batches:
            x = _noisy(snaps[idx], cfg.train_noise, channel_std, gen)
            loss = model.latent_loss(x, gen)
            _check_finite(loss, "pretrain", epoch)
            tc.adam_step(params, tc.backward(loss, params), state)
            total += loss.item()
        mean = total / len(batches)
        curve.append({"stage": "pretrain", "epoch": epoch, "latent": mean, "pred": 0.0, "total": mean})
        log.info("pretrain epoch %d latent %.5f", epoch, mean)
    return state, curve


def training_pairs(n_traj: int, length: int, cfg: TrainConfig) -> np.ndarray:
    """All (trajectory, start, j) with start + interval * j inside the trajectory."""
    rows = [(i, t, j) for i in range(n_traj) for j in range(1, cfg.max_intervals + 1)
            for t in range(length - cfg.interval * j)]
    if not rows:
        raise TrainingError(f"trajectories of length {length} too short for interval {cfg.interval}")
    return np.array(rows, dtype=np.int64)


def e2e_losses(model: MDPNet, x0: torch.Tensor, xf: torch.Tensor, j: torch.Tensor, gen: torch.Generator,
               pred_to_encoder: bool = False):
    """Latent denoising loss (current frames with their own latents, future frames with
    predicted latents) and the latent prediction loss.

    By default the prediction loss only trains the predictor. Routed into the
    encoder as well, it is minimized by shrinking every latent towards a
    constant, and the decoder then learns to ignore its condition.
    """
    Z0 = model.encode(x0)
    times = [float(s) for s in range(1, int(j.max()) + 1)]
    rows = torch.arange(x0.shape[0])
    Z_hat = model.predict_latents(Z0, times)[j - 1, rows]
    with torch.no_grad():
        Z_future = model.encode(xf)
    l_latent = 0.5 * (model.latent_loss(x0, gen) + model.latent_loss(xf, gen, latents=Z_hat))
    if not pred_to_encoder:
        Z_hat = model.predict_latents(Z0.detach(), times)[j - 1, rows]
    return l_latent, pred_loss(Z_hat, Z_future)


def train_end_to_end(model: MDPNet, data: np.ndarray, cfg: TrainConfig, state: tc.AdamState | None = None):
    """Stage 2: joint training of encoder, decoder and predictor on ``L_latent + w * L_pred``."""
    params = list(model.parameters())
    state = state or tc.AdamState.for_params(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    data_t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
    channel_std = data_t.std(dim=(0, 1, 3, 4))
    pairs = torch.from_numpy(training_pairs(data.shape[0], data.shape[1], cfg))
    curve = []
    for epoch in range(cfg.e2e_epochs):
        perm = torch.randperm(pairs.shape[0], generator=gen)
        batches = list(torch.split(perm, cfg.batch_size))
        if cfg.max_batches_per_epoch:
            batches = batches[:cfg.max_batches_per_epoch]
        sums = np.zeros(3)
        for idx in batches:
            i, t, j = pairs[idx].T
            x0 = _noisy(data_t[i, t], cfg.train_noise, channel_std, gen)
            xf = _noisy(data_t[i, t + cfg.interval * j], cfg.train_noise, channel_std, gen)
            l_lat, l_pred = e2e_losses(model, x0, xf, j, gen, cfg.pred_to_encoder)
            loss = l_lat + cfg.pred_weight * l_pred
            _check_finite(loss, "e2e", epoch)
            tc.adam_step(params, tc.backward(loss, params), state)
            sums += [l_lat.item(), l_pred.item(), loss.item()]
        m = sums / len(batches)
        curve.append({"stage": "e2e", "epoch": epoch, "latent": m[0], "pred": m[1], "total": m[2]})
        log.info("e2e epoch %d latent %.5f pred %.5f", epoch, m[0], m[1])
    return state, curve


@torch.no_grad()
def combined_loss(model: MDPNet, data: np.ndarray, cfg: TrainConfig, n_batches: int = 8, seed: int = 1234) -> float:
    """Fixed-seed estimate of ``L_latent + w * L_pred`` averaged over ``n_batches`` pair batches."""
    gen = torch.Generator().manual_seed(seed)
    data_t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
    pairs = torch.from_numpy(training_pairs(data.shape[0], data.shape[1], cfg))
    perm = torch.randperm(pairs.shape[0], generator=gen)
    total = 0.0
    for b in range(n_batches):
        idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        i, t, j = pairs[idx].T
        l_lat, l_pred = e2e_losses(model, data_t[i, t], data_t[i, t + cfg.interval * j], j, gen,
                                   cfg.pred_to_encoder)
        total += float(l_lat + cfg.pred_weight * l_pred)
    return total / n_batches


@torch.no_grad()
def rollout(model: MDPNet, x0, horizon: int, stride: int = 5, seed: int = 0) -> torch.Tensor:
    """Forecast from initial snapshots ``[B, C, H, W]``.

    Returns ``[B, horizon // stride, C, H, W]`` frames at steps ``stride, 2*stride, ...``
    (one latent time unit per stride), or ``[B, 1, ...]`` reconstructions when ``horizon == 0``.
    """
    x0 = torch.as_tensor(x0, dtype=torch.float32)
    if horizon < 0 or horizon % stride:
        raise ValueError(f"horizon {horizon} must be a non-negative multiple of stride {stride}")
    Z0 = model.encode(x0)
    if horizon == 0:
        return model.decode(Z0, seed)[:, None]
    count = horizon // stride
    Zs = model.predict_latents(Z0, [float(j) for j in range(1, count + 1)])   # [count, B, K, d]
    Zs = Zs.transpose(0, 1).reshape(-1, *Z0.shape[1:])
    frames = model.decode(Zs, seed)
    return frames.reshape(x0.shape[0], count, *x0.shape[1:])


# ---------------------------------------------------------------------------
# checkpoints

def _config_entries(prefix: str, cfg) -> dict:
    return {f"{prefix}.{k}": v for k, v in asdict(cfg).items()}


def save_checkpoint(path, model: MDPNet, stage: str, state: tc.AdamState | None = None,
                    extra: dict | None = None) -> None:
    names = [n for n, _ in model.named_parameters()]
    shapes = [tuple(p.shape) for p in model.parameters()]
    data_io.write_tensor(path, flat_params(model).numpy())
    entries = {"stage": stage, **_config_entries("model", model.cfg), **(extra or {})}
    entries["params"] = ";".join(f"{n}:{'x'.join(map(str, s)) or '1'}" for n, s in zip(names, shapes))
    if state is not None:
        by_id = {id(p): n for n, p in model.named_parameters()}
        entries.update({"adam.lr": state.lr, "adam.beta1": state.beta1, "adam.beta2": state.beta2,
                        "adam.eps": state.eps, "adam.step": state.step})
        moments = np.stack([torch.cat([m.reshape(-1) for m in state.exp_avg]).numpy(),
                            torch.cat([v.reshape(-1) for v in state.exp_avg_sq]).numpy()])
        data_io.write_tensor(str(path) + ".opt", moments)
        entries["adam.params"] = ",".join(by_id.get(id(p), "?") for p in _state_params(model, state))
    data_io.write_manifest(path, entries)


def _state_params(model, state):
    params = list(model.parameters())
    if len(state.exp_avg) == len(params):
        return params
    return model.autoencoder_params


def _parse_value(text: str, default):
    if isinstance(default, bool):
        return text == "True"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        return None if text == "None" else float(text)
    if isinstance(default, tuple):
        if not text:
            return ()
        return tuple(int(v) if v.lstrip("-").isdigit() else float(v) for v in text.split(","))
    return text


def model_config_from_manifest(meta: dict) -> ModelConfig:
    base = ModelConfig()
    values = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key in meta:
            values[f.name] = _parse_value(meta[key], getattr(base, f.name))
    return ModelConfig(**values)


def load_checkpoint(path) -> tuple[MDPNet, dict, tc.AdamState | None]:
    meta = data_io.read_manifest(path)
    model = MDPNet(model_config_from_manifest(meta))
    flat = torch.from_numpy(data_io.read_tensor(path))
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(flat[offset:offset + p.numel()].reshape(p.shape))
            offset += p.numel()
    if offset != flat.numel():
        raise data_io.FormatError(f"{path}: {flat.numel()} values, model needs {offset}")
    state = None
    if Path(str(path) + ".opt").exists():
        named = dict(model.named_parameters())
        params = [named[n] for n in meta["adam.params"].split(",")]
        moments = torch.from_numpy(data_io.read_tensor(str(path) + ".opt"))
        state = tc.AdamState(lr=float(meta["adam.lr"]), beta1=float(meta["adam.beta1"]),
                             beta2=float(meta["adam.beta2"]), eps=float(meta["adam.eps"]),
                             step=int(meta["adam.step"]))
        offset = 0
        for p in params:
            state.exp_avg.append(moments[0, offset:offset + p.numel()].reshape(p.shape).clone())
            state.exp_avg_sq.append(moments[1, offset:offset + p.numel()].reshape(p.shape).clone())
            offset += p.numel()
    return model, meta, state
