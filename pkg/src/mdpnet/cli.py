"""Command-line entry point: gen-data, train, predict, evaluate, ablate.

Every command accepts ``--config <file>`` plus one flag per configuration
key (``--latent-dim 8`` or ``--latent_dim 8``). On failure a single line
``error <category>: <message>`` goes to stderr and the exit code names the
category (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import data_io, experiments, metrics, pde_sim
from .config import ConfigError, RunConfig
from .training import (TrainingError, load_checkpoint, pretrain_autoencoder, save_checkpoint,
                       train_end_to_end, MDPNet)

log = logging.getLogger("mdpnet")

EXIT_CODES = {"config": 2, "io": 3, "format": 4, "simulation": 5, "training": 6, "shape": 7, "value": 8,
              "internal": 1}


# ---------------------------------------------------------------------------
# helpers

def _manifest(cfg: RunConfig, **extra) -> dict:
    return {**extra, **cfg.manifest_entries()}


def _split(cfg: RunConfig, n: int):
    return data_io.split_train_valid(n, cfg.data_seed, cfg.train_ratio)


def _load_dataset(cfg: RunConfig):
    data, meta = data_io.read_dataset(cfg.dataset)
    if data.ndim != 5:
        raise data_io.FormatError(f"{cfg.dataset}: expected [n, T, C, H, W], got shape {data.shape}")
    return data, meta


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary graymap of values in [0, 1] (clipped)."""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise data_io.FormatError(f"{path}: not an 8-bit binary graymap")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def snapshot_strip(truth: np.ndarray, pred: np.ndarray, channel: int) -> np.ndarray:
    """Frames side by side, ground truth on top and prediction below, for ``[T, C, H, W]`` inputs."""
    top = np.concatenate(list(truth[:, channel]), axis=1)
    bottom = np.concatenate(list(pred[:, channel]), axis=1)
    return np.concatenate([top, bottom], axis=0)


def _write_csv(path, header, rows, cfg: RunConfig, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    data_io.write_manifest(path, _manifest(cfg, **extra))


# ---------------------------------------------------------------------------
# commands

def simulate(cfg: RunConfig, index: int) -> pde_sim.Trajectory:
    seed = cfg.data_seed + index
    if cfg.system == "Cylinder":
        values = [float(v) for v in cfg.reynolds.split(",")]
        sim_cfg = pde_sim.CylinderConfig(reynolds=values[index % len(values)], nx=cfg.lbm_nx, ny=cfg.lbm_ny,
                                         warmup_steps=cfg.lbm_warmup, downsample=cfg.lbm_downsample,
                                         out_height=cfg.height, out_width=cfg.width, seed=seed)
        return pde_sim.simulate_cylinder_lbm(sim_cfg)
    overrides = {"seed": seed}
    if cfg.sim_T > 0:
        overrides["T"] = cfg.sim_T
    if cfg.system == "GS" or cfg.simulate_native:
        overrides.update(out_height=cfg.height, out_width=cfg.width)
    else:
        overrides.update(height=cfg.height, width=cfg.width)
    sim_cfg = pde_sim.default_config(cfg.system, **overrides)
    return pde_sim.simulate_reaction_diffusion(sim_cfg)


def cmd_gen_data(cfg: RunConfig) -> Path:
    trajectories = []
    for i in range(cfg.n_traj):
        try:
            trajectories.append(simulate(cfg, i))
        except pde_sim.SimulationError as exc:
            raise pde_sim.SimulationError(f"trajectory {i}: {exc}") from exc
    raw = np.stack([t.states for t in trajectories])
    data, stats = data_io.minmax_normalize(raw)
    physical = {f"sim.{k}": v for k, v in trajectories[0].config.items() if k != "seed"}
    path = Path(cfg.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    data_io.write_dataset(data, path, _manifest(cfg, **physical, record_dt=trajectories[0].record_dt,
                                                **{"norm.min": list(stats.min), "norm.max": list(stats.max)}))
    log.info("wrote %s with shape %s", path, data.shape)
    return path


def cmd_train(cfg: RunConfig) -> Path:
    data, _ = _load_dataset(cfg)
    train_idx, valid_idx = _split(cfg, data.shape[0])
    train = data[train_idx]
    n, _, c, h, w = data.shape
    model = MDPNet(cfg.model_config(channels=c, height=h, width=w))
    tcfg = cfg.train_config()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = _manifest(cfg, dataset=cfg.dataset, train=list(train_idx), valid=list(valid_idx))

    state, curve = pretrain_autoencoder(model, train, tcfg)
    pre_path = out / "model_pretrain.mdpt"
    save_checkpoint(pre_path, model, "pretrain", state, extra)
    try:
        state, curve2 = train_end_to_end(model, train, tcfg)
    except TrainingError as exc:
        raise TrainingError(f"{exc}; last good checkpoint is {pre_path}") from exc
    final = cfg.path("checkpoint", "model_e2e.mdpt")
    save_checkpoint(final, model, "e2e", state, extra)
    rows = [(r["stage"], r["epoch"], r["latent"], r["pred"], r["total"]) for r in curve + curve2]
    _write_csv(out / "losses.csv", ["stage", "epoch", "latent", "pred", "total"], rows, cfg)
    return final


def cmd_predict(cfg: RunConfig) -> Path:
    model, _, _ = load_checkpoint(cfg.path("checkpoint", "model_e2e.mdpt"))
    data, _ = _load_dataset(cfg)
    _, valid_idx = _split(cfg, data.shape[0])
    valid = data[valid_idx]
    horizon = cfg.horizon or experiments.default_horizon(valid.shape[1], cfg.interval)
    if horizon > valid.shape[1] - 1:
        raise ValueError(f"horizon {horizon} exceeds trajectory length {valid.shape[1]}")
    pred, truth = experiments.forecast(model, valid, horizon, cfg.interval, cfg.sample_seed)
    meta = _manifest(cfg, valid=list(valid_idx), stride=cfg.interval, horizon=horizon,
                     frames=list(range(cfg.interval, horizon + 1, cfg.interval)))
    pred_path = cfg.path("predictions", "predictions.mdpt")
    truth_path = cfg.path("truth", "truth.mdpt")
    pred_path.parent.mkdir(parents=True, exist_ok=True)
    data_io.write_dataset(pred, pred_path, {"kind": "prediction", **meta})
    data_io.write_dataset(truth, truth_path, {"kind": "truth", **meta})
    if cfg.images:
        image_dir = Path(cfg.out_dir) / "snapshots"
        image_dir.mkdir(parents=True, exist_ok=True)
        for i, traj in enumerate(valid_idx):
            for ch in range(pred.shape[2]):
                write_pgm(image_dir / f"traj{traj:03d}_ch{ch}.pgm", snapshot_strip(truth[i], pred[i], ch))
        data_io.write_manifest(image_dir / "snapshots", meta)
    return pred_path


def evaluation_rows(truth: np.ndarray, pred: np.ndarray):
    report = metrics.evaluate_trajectories(truth, pred)
    n, T = report.nmse.shape
    rows = [(i, t, report.nmse[i, t], report.ssim[i, t], "", "") for i in range(n) for t in range(T)]
    rows.append(("all", "all", report.nmse_mean, report.ssim_mean, report.nmse_std, report.ssim_std))
    return rows


def cmd_evaluate(cfg: RunConfig) -> Path:
    truth_path = cfg.path("truth", "truth.mdpt")
    pred_path = cfg.path("predictions", "predictions.mdpt")
    truth = data_io.read_tensor(truth_path)
    pred = data_io.read_tensor(pred_path)
    if truth.shape != pred.shape:
        raise metrics.ShapeMismatch(f"{truth_path} has shape {truth.shape} but {pred_path} has {pred.shape}")
    out = cfg.path("metrics", "metrics.csv")
    _write_csv(out, ["trajectory", "frame", "nmse", "ssim", "nmse_std", "ssim_std"],
               evaluation_rows(truth, pred), cfg, truth=str(truth_path), predictions=str(pred_path))
    return out


def _ablation_run(cfg: RunConfig, train, valid, horizon, seed, **model_overrides):
    tcfg = cfg.train_config(seed=seed, train_noise=model_overrides.pop("train_noise", cfg.train_noise))
    model, _ = experiments.fit(cfg.model_config(seed=seed, channels=train.shape[2], height=train.shape[3],
                                                width=train.shape[4], **model_overrides), tcfg, train)
    report = experiments.score(model, valid, horizon, cfg.interval, cfg.sample_seed)
    return model, report


def cmd_ablate(cfg: RunConfig) -> list[Path]:
    data, _ = _load_dataset(cfg)
    train_idx, valid_idx = _split(cfg, data.shape[0])
    train, valid = data[train_idx], data[valid_idx]
    horizon = cfg.horizon or experiments.default_horizon(valid.shape[1], cfg.interval)
    seeds = [int(s) for s in cfg.ablate_seeds.split(",")]
    parts = {p.strip() for p in cfg.ablate_parts.split(",") if p.strip()}
    if not parts <= {"a", "b", "c", "d"}:
        raise ConfigError(f"ablate_parts must be drawn from a,b,c,d, got {cfg.ablate_parts!r}")
    out = Path(cfg.out_dir)
    header = ["seed", "nmse", "ssim", "nmse_std", "ssim_std"]
    written = []

    def emit(name, head, rows):
        path = out / f"ablation_{name}.csv"
        _write_csv(path, head, rows, cfg, horizon=horizon)
        written.append(path)

    if "a" in parts:
        rows = []
        for K in (int(k) for k in cfg.ablate_scales.split(",")):
            for seed in seeds:
                _, r = _ablation_run(cfg, train, valid, horizon, seed, n_scales=K,
                                     diffusion_steps=K * cfg.steps_per_scale, allocation=())
                rows.append((K, K * cfg.steps_per_scale, seed, r.nmse_mean, r.ssim_mean, r.nmse_std, r.ssim_std))
        emit("a_scales", ["n_scales", "diffusion_steps"] + header, rows)
    if "b" in parts:
        rows = []
        for spec in cfg.ablate_allocations.split(";"):
            weights = tuple(float(v) for v in spec.split(":"))
            for seed in seeds:
                model, r = _ablation_run(cfg, train, valid, horizon, seed, n_scales=len(weights), allocation=weights)
                stages = ";".join(f"{a}-{b}" for a, b in zip(model.stages.edges[:-1], model.stages.edges[1:]))
                rows.append((spec, stages, seed, r.nmse_mean, r.ssim_mean, r.nmse_std, r.ssim_std))
        emit("b_allocation", ["allocation", "stages"] + header, rows)
    if "c" in parts:
        rows = []
        for level in (float(v) for v in cfg.ablate_noise.split(",")):
            for seed in seeds:
                _, r = _ablation_run(cfg, train, valid, horizon, seed, train_noise=level)
                rows.append((level, seed, r.nmse_mean, r.ssim_mean, r.nmse_std, r.ssim_std))
        emit("c_noise", ["train_noise"] + header, rows)
    if "d" in parts:
        ckpt = cfg.path("checkpoint", "model_e2e.mdpt")
        if ckpt.exists():
            model, _, _ = load_checkpoint(ckpt)
        else:
            model, _ = _ablation_run(cfg, train, valid, horizon, cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        picks = rng.choice(valid.shape[0] * valid.shape[1], size=cfg.perturb_samples, replace=False)
        x = valid.reshape(-1, *valid.shape[2:])[np.sort(picks)]
        strengths = [float(s) for s in cfg.perturb_strengths.split(",")]
        rows = []
        for k in range(1, model.cfg.n_scales + 1):
            for row in experiments.latent_perturbation(model, x, strengths, k, cfg.seed, cfg.sample_seed):
                rows.append((row["scale"], row["strength"], row["read_scale"], row["reencode"], row["input"]))
        emit("d_perturbation", ["perturbed_scale", "strength", "read_scale", "pearson_reencode",
                                "pearson_input"], rows)
    return written


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


# ---------------------------------------------------------------------------
# argument handling

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error config: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CODES["config"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdpnet", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        for key in config_mod.FIELDS:
            p.add_argument(f"--{key.replace('_', '-')}", f"--{key}", dest=key, default=None, metavar="VALUE")
    return parser


def _category(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, data_io.FormatError):
        return "format"
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return "io"
    if isinstance(exc, pde_sim.SimulationError):
        return "simulation"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, metrics.ShapeMismatch):
        return "shape"
    if isinstance(exc, ValueError):
        return "value"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in config_mod.FIELDS and v is not None}
    try:
        cfg = config_mod.load(args.config, overrides)
        torch.manual_seed(cfg.seed)
        result = COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one diagnostic line
        category = _category(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error {category}: {message}", file=sys.stderr)
        return EXIT_CODES[category]
    if isinstance(result, list):
        for path in result:
            print(path)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
