"""Run configuration shared by every CLI command.

A run is described by flat ``key=value`` lines. Blank lines and ``#``
comments are ignored. Every key has a default (see ``RunConfig``), unknown
keys are rejected, and the effective configuration is echoed into the
manifest of every artifact a command writes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data generation
    system: str = "Bruss"             # LO, Bruss, GS or Cylinder
    height: int = 32                  # exported grid
    width: int = 32
    n_traj: int = 25
    train_ratio: float = 0.8          # fraction of trajectories used for training
    sim_T: float = 0.0                # physical horizon; 0 keeps the system default
    simulate_native: bool = False     # LO/Bruss: simulate on the table grid and resize (GS always does)
    reynolds: str = "100"             # Cylinder only; trajectories cycle over these values
    lbm_nx: int = 420
    lbm_ny: int = 180
    lbm_warmup: int = 20000
    lbm_downsample: int = 300
    data_seed: int = 0
    dataset: str = "runs/dataset.mdpt"
    out_dir: str = "runs"
    # model
    n_scales: int = 3
    latent_dim: int = 16
    diffusion_steps: int = 100
    allocation: str = ""              # stage weights fine->coarse, e.g. 1:4:9; empty = uniform
    stage_mode: str = "global"        # global or restart
    scale_progression: str = "linear"
    encoder_hidden: int = 32
    unet_widths: str = "16,32,32"
    gnode_hidden: int = 32
    interaction: bool = True
    solver: str = "rk4"               # rk4 or dopri5
    solver_step: float = 0.25
    # training
    pretrain_epochs: int = 50
    e2e_epochs: int = 50
    batch_size: int = 18
    lr: float = 1e-4
    interval: int = 5                 # snapshot steps per unit of latent time
    max_intervals: int = 2
    pred_weight: float = 1.0
    pred_to_encoder: bool = False
    train_noise: float = 0.0
    max_batches_per_epoch: int = 0    # 0 = full pass over the data
    seed: int = 0
    # prediction and evaluation
    checkpoint: str = ""              # empty: <out_dir>/model_e2e.mdpt
    horizon: int = 0                  # 0: as far as the trajectory allows
    sample_seed: int = 0
    images: bool = True
    predictions: str = ""             # empty: <out_dir>/predictions.mdpt
    truth: str = ""                   # empty: <out_dir>/truth.mdpt
    metrics: str = ""                 # empty: <out_dir>/metrics.csv
    # ablations
    ablate_parts: str = "a,b,c,d"
    ablate_scales: str = "1,2,3,4,5"
    steps_per_scale: int = 30
    ablate_allocations: str = "1:1:1;1:4:9;9:4:1"
    ablate_noise: str = "0,0.1,0.3,1.0"
    perturb_strengths: str = "0,0.1,0.3,1.0"
    perturb_samples: int = 4
    ablate_seeds: str = "0"

    def __post_init__(self):
        if self.system not in ("LO", "Bruss", "GS", "Cylinder"):
            raise ConfigError(f"unknown system {self.system!r}")
        if min(self.height, self.width, self.n_traj, self.n_scales, self.latent_dim, self.diffusion_steps,
               self.batch_size, self.interval) < 1:
            raise ConfigError("grid, counts, batch size and interval must be positive")
        if not 0 < self.train_ratio < 1:
            raise ConfigError("train_ratio must lie in (0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.stage_mode not in ("global", "restart"):
            raise ConfigError(f"unknown stage_mode {self.stage_mode!r}")

    # ------------------------------------------------------------------
    def path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.out_dir) / default_name

    def model_config(self, **overrides) -> ModelConfig:
        alloc = tuple(float(a) for a in self.allocation.split(":")) if self.allocation else ()
        cfg = dict(channels=2, height=self.height, width=self.width, n_scales=self.n_scales,
                   latent_dim=self.latent_dim, diffusion_steps=self.diffusion_steps, allocation=alloc,
                   stage_mode=self.stage_mode, scale_progression=self.scale_progression,
                   encoder_hidden=self.encoder_hidden,
                   unet_widths=tuple(int(w) for w in self.unet_widths.split(",")),
                   gnode_hidden=self.gnode_hidden, interaction=self.interaction, solver=self.solver,
                   solver_step=self.solver_step, seed=self.seed)
        cfg.update(overrides)
        return ModelConfig(**cfg)

    def train_config(self, **overrides) -> TrainConfig:
        cfg = dict(pretrain_epochs=self.pretrain_epochs, e2e_epochs=self.e2e_epochs,
                   batch_size=self.batch_size, lr=self.lr, interval=self.interval,
                   max_intervals=self.max_intervals, pred_weight=self.pred_weight,
                   pred_to_encoder=self.pred_to_encoder, seed=self.seed,
                   train_noise=self.train_noise, max_batches_per_epoch=self.max_batches_per_epoch)
        cfg.update(overrides)
        return TrainConfig(**cfg)

    def manifest_entries(self) -> dict:
        return {f"config.{k}": v for k, v in asdict(self).items()}


FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(key: str, text: str):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(getattr(RunConfig, key)) if hasattr(RunConfig, key) else str
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {kind.__name__})") from None


def parse_lines(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = coerce(key, value)
    return values


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already coerced or raw strings)."""
    values = parse_lines(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
    unknown = set(values) - set(FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**values)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())
