"""Coarsening-guided diffusion decoder.

The ``N`` diffusion steps are partitioned into ``K`` contiguous stages; step
``n`` belongs to stage ``k = stage_of_step(n)`` (larger ``n`` means coarser
``k``). During stage ``k`` the forward process noises the coarse state
``x^k`` and the noise network is conditioned on the latent ``z^k``.

Two noise-level conventions are supported:

* ``"global"`` (default): the usual cumulative product ``abar_n`` over all
  steps, with only the clean target and the condition switching per stage.
* ``"restart"``: ``abar_n`` restarts at each stage boundary (product over the
  stage's own steps). Reverse sampling then lands on a clean coarse estimate at
  the bottom of each stage and re-noises it to the next stage's entry level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import tensor_core as tc
from .multiscale import ScalePyramid, decompose_residuals

MODES = ("global", "restart")


@dataclass
class NoiseSchedule:
    betas: torch.Tensor          # float64, length N
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor

    @property
    def N(self) -> int:
        return self.betas.numel()


def make_schedule(N: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta ramp, ``alpha = 1 - beta``, cumulative products and ``sigma^2 = beta``."""
    if N < 1:
        raise ValueError(f"need at least one diffusion step, got {N}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = torch.linspace(beta_start, beta_end, N, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, 0), betas.sqrt())


def default_beta_range(N: int) -> tuple[float, float]:
    """The 1e-4..0.02 ramp of a 1000-step model, rescaled so ``N`` steps reach the same terminal noise."""
    scale = 1000.0 / N
    end = min(0.02 * scale, 0.999)
    return min(1e-4 * scale, end), end


@dataclass
class StageSchedule:
    N: int
    boundaries: tuple[int, ...]   # K-1 interior boundaries, strictly increasing
    mode: str = "global"

    @property
    def K(self) -> int:
        return len(self.boundaries) + 1

    @property
    def edges(self) -> tuple[int, ...]:
        return (0, *self.boundaries, self.N)

    def stage_range(self, k: int) -> range:
        e = self.edges
        return range(e[k - 1], e[k])


def make_stage_schedule(N: int, K: int, allocation=None, mode: str = "global") -> StageSchedule:
    """Split ``N`` steps into ``K`` stages with widths proportional to ``allocation``
    (listed fine to coarse, i.e. stage 1 first)."""
    if mode not in MODES:
        raise ValueError(f"unknown stage mode {mode!r}")
    if K < 1 or N < K:
        raise ValueError(f"cannot split {N} steps into {K} stages")
    weights = [1.0] * K if allocation is None else [float(w) for w in allocation]
    if len(weights) != K or any(w <= 0 for w in weights):
        raise ValueError(f"allocation must have {K} positive weights, got {allocation}")
    total = sum(weights)
    bounds, acc = [], 0.0
    for i, w in enumerate(weights[:-1]):
        acc += w
        b = math.floor(N * acc / total + 0.5)
        lo = bounds[-1] + 1 if bounds else 1
        hi = N - (K - 1 - i)
        bounds.append(min(max(b, lo), hi))
    return StageSchedule(N, tuple(bounds), mode)


def stage_of_step(stages: StageSchedule, n):
    """Stage index ``k`` (1-based) of diffusion step(s) ``n``; half-open intervals."""
    nt = torch.as_tensor(n)
    if nt.numel() and (int(nt.min()) < 0 or int(nt.max()) >= stages.N):
        raise ValueError(f"diffusion step outside 0..{stages.N - 1}")
    k = torch.bucketize(nt, torch.tensor(stages.boundaries, dtype=nt.dtype), right=True) + 1
    return int(k) if k.dim() == 0 else k


def effective_alpha_bar(schedule: NoiseSchedule, stages: StageSchedule, n):
    """``abar*_n``: global cumulative product, or the per-stage product in restart mode."""
    nt = torch.as_tensor(n, dtype=torch.long)
    if stages.mode == "global":
        return schedule.alpha_bars[nt]
    k = torch.as_tensor(stage_of_step(stages, nt))
    start = torch.tensor(stages.edges, dtype=torch.long)[k - 1]
    log_cum = torch.cumsum(torch.log(schedule.alphas), 0)
    before = torch.where(start > 0, log_cum[(start - 1).clamp(min=0)], torch.zeros((), dtype=torch.float64))
    return torch.exp(log_cum[nt] - before)


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def forward_noising(pyramid: ScalePyramid, n, schedule: NoiseSchedule, stages: StageSchedule,
                    eps: torch.Tensor) -> torch.Tensor:
    """Noisy sample at step(s) ``n``: ``sqrt(abar*) x^k + sqrt(1 - abar*) eps`` with ``k = stage(n)``.

    ``pyramid.residuals`` is ``[B, K, C, H, W]`` and ``n`` a length-B tensor,
    or ``[K, C, H, W]`` with a scalar ``n``.
    """
    if pyramid.K != stages.K:
        raise ValueError(f"pyramid has {pyramid.K} scales, stage schedule {stages.K}")
    coarse = pyramid.coarse_states()
    nt = torch.as_tensor(n, dtype=torch.long)
    k = torch.as_tensor(stage_of_step(stages, nt))
    if nt.dim() == 0:
        target = coarse[k - 1]
    else:
        target = coarse[torch.arange(coarse.shape[0]), k - 1]
    if eps.shape != target.shape:
        raise tc.ShapeError(f"noise shape {tuple(eps.shape)} != snapshot shape {tuple(target.shape)}")
    ab = _bcast(effective_alpha_bar(schedule, stages, nt), target)
    return ab.sqrt() * target + (1 - ab).sqrt() * eps


def posterior_step(x_n: torch.Tensor, eps_hat: torch.Tensor, n: int, schedule: NoiseSchedule,
                   noise_draw: torch.Tensor | None, stages: StageSchedule | None = None,
                   add_noise: bool = True) -> torch.Tensor:
    """One reverse step ``x_n -> x_{n-1}``: the posterior mean plus ``sigma_n`` times ``noise_draw``.

    No noise is added at ``n = 0``, at the bottom of a stage in restart mode,
    or when ``add_noise`` is false.
    """
    alpha = float(schedule.alphas[n])
    abar = float(schedule.alpha_bars[n] if stages is None else effective_alpha_bar(schedule, stages, n))
    mean = (x_n - (1.0 - alpha) / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    at_floor = n == 0 or (stages is not None and stages.mode == "restart" and n in stages.boundaries)
    if at_floor or not add_noise or noise_draw is None:
        return mean
    return mean + float(schedule.sigmas[n]) * noise_draw


def clip_noise_estimate(x_n: torch.Tensor, eps_hat: torch.Tensor, abar: float, lo: float, hi: float):
    """Noise estimate consistent with the implied clean sample clipped to ``[lo, hi]``."""
    x0 = ((x_n - math.sqrt(1 - abar) * eps_hat) / math.sqrt(abar)).clamp(lo, hi)
    return (x_n - math.sqrt(abar) * x0) / math.sqrt(1 - abar)


def reverse_sample(eps_model, Z: torch.Tensor, shape, schedule: NoiseSchedule, stages: StageSchedule,
                   seed: int = 0, add_noise: bool = True, clip: tuple[float, float] | None = None) -> torch.Tensor:
    """Sample snapshots ``[B, *shape]`` from noise, conditioning step ``n`` on ``Z[:, stage(n) - 1]``.

    ``eps_model(x_n, n_batch, cond)`` returns the noise estimate. ``Z`` is
    ``[B, K, d]``. With ``clip``, each noise estimate is replaced by the one
    whose implied clean sample lies inside the given range.
    """
    if Z.shape[-2] != stages.K:
        raise ValueError(f"latent has {Z.shape[-2]} scales, schedule expects {stages.K}")
    gen = torch.Generator().manual_seed(seed)
    b = Z.shape[0]
    x = torch.randn((b, *shape), generator=gen, dtype=Z.dtype)
    for n in range(stages.N - 1, -1, -1):
        k = stage_of_step(stages, n)
        if stages.mode == "restart" and k < stages.K and n == stages.edges[k] - 1:
            ab = float(effective_alpha_bar(schedule, stages, n))
            x = math.sqrt(ab) * x + math.sqrt(1 - ab) * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        n_batch = torch.full((b,), n, dtype=torch.long)
        eps_hat = eps_model(x, n_batch, Z[:, k - 1])
        if clip is not None:
            eps_hat = clip_noise_estimate(x, eps_hat, float(effective_alpha_bar(schedule, stages, n)), *clip)
        draw = torch.randn(x.shape, generator=gen, dtype=x.dtype) if n > 0 else None
        x = posterior_step(x, eps_hat, n, schedule, draw, stages, add_noise)
    return x


def oracle_noise_predictor(clean: torch.Tensor, K: int, schedule: NoiseSchedule, stages: StageSchedule,
                           progression: str = "linear"):
    """Exact noise estimator for memorized snapshot(s) ``clean`` ``[B, C, H, W]``."""
    coarse = decompose_residuals(clean, K, progression).coarse_states()

    def eps_model(x_n, n, cond):
        k = torch.as_tensor(stage_of_step(stages, n))
        target = coarse[torch.arange(coarse.shape[0]), k - 1]
        ab = _bcast(effective_alpha_bar(schedule, stages, n), x_n)
        return (x_n - ab.sqrt() * target) / (1 - ab).sqrt()

    return eps_model


def sinusoidal_embedding(n: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = n.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class SelfAttention(torch.nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = tc.GroupNorm(channels)
        self.q = tc.Linear(channels, channels)
        self.k = tc.Linear(channels, channels)
        self.v = tc.Linear(channels, channels)
        self.out = tc.Linear(channels, channels)

    def forward(self, x):
        b, c, h, w = x.shape
        t = self.norm(x).flatten(2).transpose(1, 2)
        a = tc.scaled_dot_attention(self.q(t), self.k(t), self.v(t))
        return x + self.out(a).transpose(1, 2).reshape(b, c, h, w)


class ResAttnBlock(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, attention: bool = True):
        super().__init__()
        self.norm1 = tc.GroupNorm(c_in)
        self.conv1 = tc.Conv2d(c_in, c_out)
        self.time = tc.Linear(time_dim, 2 * c_out)
        self.norm2 = tc.GroupNorm(c_out)
        self.conv2 = tc.Conv2d(c_out, c_out)
        self.skip = tc.Conv2d(c_in, c_out, 1) if c_in != c_out else None
        self.attn = SelfAttention(c_out) if attention else None

    def forward(self, x, temb):
        h = self.conv1(tc.silu(self.norm1(x)))
        # scale and shift after the norm: a bias added before it would be
        # normalized away whenever a group holds a single channel
        scale, shift = self.time(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.conv2(tc.silu(self.norm2(h) * (1 + scale) + shift))
        x = (x if self.skip is None else self.skip(x)) + h
        return x if self.attn is None else self.attn(x)


class ConditionalAttention(torch.nn.Module):
    """Queries from the latent vector, keys/values from feature-map tokens.

    The latent is decoded into a small grid of query tokens (at most
    ``query_grid`` per side). Each token attends over the feature map; the
    attended values, with the queries as residual stream, are projected,
    upsampled bilinearly and added to the features. A single global query
    would only shift each channel uniformly.
    """

    def __init__(self, channels: int, cond_dim: int, query_grid: int = 8):
        super().__init__()
        self.channels = channels
        self.query_grid = query_grid
        self.norm = tc.GroupNorm(channels)
        self.q = tc.Linear(cond_dim, channels * query_grid * query_grid)
        self.k = tc.Linear(channels, channels)
        self.v = tc.Linear(channels, channels)
        self.out = tc.Linear(channels, channels)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        gh, gw = min(h, self.query_grid), min(w, self.query_grid)
        q = self.q(cond).reshape(b, self.query_grid, self.query_grid, c)[:, :gh, :gw].reshape(b, gh * gw, c)
        t = self.norm(x).flatten(2).transpose(1, 2)
        summary = self.out(q + tc.scaled_dot_attention(q, self.k(t), self.v(t)))
        grid = summary.transpose(1, 2).reshape(b, c, gh, gw)
        return x + tc.upsample_bilinear(grid, h, w)


class ConditionalUNet(torch.nn.Module):
    """Noise network ``eps(x_n, n, z)``: a 3-level UNet with residual-attention blocks and
    conditional attention after each block of the upsampling path.

    Self-attention is skipped at the full-resolution level unless
    ``full_res_attention`` is set (it dominates the cost there).
    """

    def __init__(self, channels: int, cond_dim: int, widths=(16, 32, 32), blocks_per_level: int = 2,
                 time_dim: int | None = None, full_res_attention: bool = False):
        super().__init__()
        self.channels = channels
        self.cond_dim = cond_dim
        self.widths = tuple(widths)
        time_dim = time_dim or 4 * widths[0]
        self.time_dim = time_dim
        self.time1 = tc.Linear(time_dim, time_dim)
        self.time2 = tc.Linear(time_dim, time_dim)
        self.conv_in = tc.Conv2d(channels, widths[0])

        self.down = torch.nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            level = torch.nn.ModuleList()
            for _ in range(blocks_per_level):
                level.append(ResAttnBlock(ch, w, time_dim, i > 0 or full_res_attention))
                ch = w
            self.down.append(level)
        self.n_down = len(widths) - 1
        self.mid = ResAttnBlock(ch, ch, time_dim)

        down_skips = self._skip_layout(widths, blocks_per_level)
        self.up = torch.nn.ModuleList()
        self.up_cond = torch.nn.ModuleList()
        self.up_conv = torch.nn.ModuleList()
        for i in reversed(range(len(widths))):
            blocks, conds = torch.nn.ModuleList(), torch.nn.ModuleList()
            for _ in range(blocks_per_level + 1):
                blocks.append(ResAttnBlock(ch + down_skips.pop(), widths[i], time_dim, i > 0 or full_res_attention))
                conds.append(ConditionalAttention(widths[i], cond_dim))
                ch = widths[i]
            self.up.append(blocks)
            self.up_cond.append(conds)
            self.up_conv.append(tc.Conv2d(ch, ch) if i > 0 else torch.nn.Identity())
        self.norm_out = tc.GroupNorm(ch)
        self.conv_out = tc.Conv2d(ch, channels)

    @staticmethod
    def _skip_layout(widths, blocks_per_level):
        layout, ch = [widths[0]], widths[0]
        for i, w in enumerate(widths):
            for _ in range(blocks_per_level):
                ch = w
                layout.append(ch)
            if i < len(widths) - 1:
                layout.append(ch)
        return layout

    def forward(self, x, n, cond):
        if cond.shape[-1] != self.cond_dim:
            raise tc.ShapeError(f"condition length {cond.shape[-1]} != latent dim {self.cond_dim}")
        if x.shape[-3] != self.channels:
            raise tc.ShapeError(f"expected {self.channels} channels, got {x.shape[-3]}")
        n = torch.as_tensor(n, dtype=torch.long).reshape(-1).expand(x.shape[0])
        temb = sinusoidal_embedding(n, self.time_dim).to(x.dtype)
        temb = self.time2(tc.silu(self.time1(temb)))

        h = self.conv_in(x)
        skips = [h]
        for i, level in enumerate(self.down):
            for block in level:
                h = block(h, temb)
                skips.append(h)
            if i < self.n_down:
                h = tc.avg_pool2d(h, 2)
                skips.append(h)
        h = self.mid(h, temb)
        for j, (blocks, conds) in enumerate(zip(self.up, self.up_cond)):
            for block, cattn in zip(blocks, conds):
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
                h = cattn(h, cond)
            if j < self.n_down:
                hh, ww = h.shape[-2:]
                h = self.up_conv[j](tc.upsample_bilinear(h, 2 * hh, 2 * ww))
        return self.conv_out(tc.silu(self.norm_out(h)))


def predict_noise(unet: ConditionalUNet, x_n: torch.Tensor, n, z: torch.Tensor) -> torch.Tensor:
    return unet(x_n, n, z)


def latent_loss(encoder, eps_model, x: torch.Tensor, schedule: NoiseSchedule, stages: StageSchedule,
                generator: torch.Generator, latents: torch.Tensor | None = None) -> torch.Tensor:
    """Noise-estimation MSE on a batch of snapshots ``[B, C, H, W]``.

    Conditions come from encoding ``x`` unless ``latents`` (``[B, K, d]``,
    e.g. predicted future latents) are supplied.
    """
    pyramid = decompose_residuals(x, stages.K, encoder.progression, encoder.interp)
    Z = encoder.encode_pyramid(pyramid) if latents is None else latents
    b = x.shape[0]
    n = torch.randint(0, stages.N, (b,), generator=generator)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    x_n = forward_noising(pyramid, n, schedule, stages, eps)
    k = torch.as_tensor(stage_of_step(stages, n))
    cond = Z[torch.arange(b), k - 1]
    eps_hat = eps_model(x_n, n, cond)
    return ((eps - eps_hat) ** 2).mean()
