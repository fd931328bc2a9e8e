"""Multiscale residual decomposition and the scale-aware encoder.

A snapshot ``x`` is split into residuals ``r^1..r^K`` (``k = K`` coarsest)
with ``r^K = Q(x, f_K)`` and ``r^k = Q(x - sum_{i>k} r^i, f_k)``, where ``Q``
average-pools by factor ``f_k`` and interpolates back. The finest factor is 1,
so ``r^1`` absorbs everything left over and the residuals sum to ``x``.
The coarse state of scale ``k`` is ``x^k = sum_{i=k..K} r^i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import tensor_core as tc


def scale_factor(k: int, progression: str = "linear") -> int:
    """Pooling factor of scale ``k``: ``k`` itself, or ``2**(k-1)`` for "pow2"."""
    if k < 1:
        raise ValueError(f"scale index must be >= 1, got {k}")
    if progression == "linear":
        return k
    if progression == "pow2":
        return 2 ** (k - 1)
    raise ValueError(f"unknown scale progression {progression!r}")


def coarsen(x: torch.Tensor, factor: int, interp: str = "bilinear") -> torch.Tensor:
    """Average-pool by ``factor`` then interpolate back to the input resolution.

    ``x`` is ``[..., C, H, W]``. Extents not divisible by ``factor`` are
    reflect-padded at the bottom/right before pooling and cropped afterwards
    (edge-replicated when the pad is as wide as the field itself).
    ``interp="nearest"`` replaces the bilinear upsample with block replication.
    """
    if factor < 1:
        raise ValueError(f"coarsening factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    flat = x.reshape(-1, c, h, w)
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        flat = F.pad(flat, (0, pw, 0, ph), mode=mode)
    hp, wp = flat.shape[-2:]
    pooled = tc.avg_pool2d(flat, factor)
    if interp == "bilinear":
        up = tc.upsample_bilinear(pooled, hp, wp)
    elif interp == "nearest":
        up = pooled.repeat_interleave(factor, -2).repeat_interleave(factor, -1)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return up[..., :h, :w].reshape(*lead, c, h, w)


@dataclass
class ScalePyramid:
    """Residuals stacked on a scale axis: ``residuals[..., k-1, C, H, W]`` is ``r^k``."""

    residuals: torch.Tensor

    @property
    def K(self) -> int:
        return self.residuals.shape[-4]

    def residual(self, k: int) -> torch.Tensor:
        self._check(k)
        return self.residuals[..., k - 1, :, :, :]

    def coarse(self, k: int) -> torch.Tensor:
        return accumulate_coarse(self, k)

    def coarse_states(self) -> torch.Tensor:
        """All ``x^k`` stacked like ``residuals``."""
        rev = torch.flip(self.residuals, dims=[-4])
        return torch.flip(torch.cumsum(rev, dim=-4), dims=[-4])

    def _check(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ValueError(f"scale {k} outside 1..{self.K}")


def decompose_residuals(x: torch.Tensor, K: int, progression: str = "linear",
                        interp: str = "bilinear") -> ScalePyramid:
    if K < 1:
        raise ValueError(f"scale count must be >= 1, got {K}")
    residuals = [None] * K
    acc = torch.zeros_like(x)
    for k in range(K, 0, -1):
        r = coarsen(x - acc, scale_factor(k, progression), interp)
        residuals[k - 1] = r
        acc = acc + r
    return ScalePyramid(torch.stack(residuals, dim=-4))


def accumulate_coarse(pyramid: ScalePyramid, k: int) -> torch.Tensor:
    """``x^k = sum_{i=k..K} r^i``, summed from the coarsest scale down."""
    pyramid._check(k)
    out = pyramid.residual(pyramid.K)
    for i in range(pyramid.K - 1, k - 1, -1):
        out = out + pyramid.residual(i)
    return out


class ChannelSpatialAttention(torch.nn.Module):
    """CBAM: channel gate from pooled descriptors, then a spatial gate."""

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 3):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = tc.Linear(channels, hidden)
        self.fc2 = tc.Linear(hidden, channels)
        self.spatial = tc.Conv2d(2, 1, spatial_kernel)

    def forward(self, x):
        avg = x.mean(dim=(-2, -1))
        mx = x.amax(dim=(-2, -1))
        gate = torch.sigmoid(self.fc2(tc.silu(self.fc1(avg))) + self.fc2(tc.silu(self.fc1(mx))))
        x = x * gate[..., None, None]
        desc = torch.stack([x.mean(dim=-3), x.amax(dim=-3)], dim=-3)
        return x * torch.sigmoid(self.spatial(desc))


class EncoderBlock(torch.nn.Module):
    """Conv -> GroupNorm -> SiLU with a 1x1 skip, then 2x AvgPool and CBAM."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = tc.Conv2d(c_in, c_out, 3)
        self.norm = tc.GroupNorm(c_out)
        self.skip = tc.Conv2d(c_in, c_out, 1)
        self.cbam = ChannelSpatialAttention(c_out)

    def forward(self, x):
        h = tc.silu(self.norm(self.conv(x))) + self.skip(x)
        return self.cbam(tc.avg_pool2d(h, 2))


class ScaleAwareEncoder(torch.nn.Module):
    """One encoder shared across scales; a learned embedding row tells it which scale it sees."""

    def __init__(self, channels: int, height: int, width: int, latent_dim: int, n_scales: int,
                 hidden: int = 32, progression: str = "linear", interp: str = "bilinear"):
        super().__init__()
        if height % 4 or width % 4:
            raise ValueError(f"encoder needs extents divisible by 4, got {height}x{width}")
        self.n_scales = n_scales
        self.latent_dim = latent_dim
        self.progression = progression
        self.interp = interp
        self.block1 = EncoderBlock(channels, hidden)
        self.block2 = EncoderBlock(hidden, hidden)
        self.scale_embedding = torch.nn.Parameter(torch.zeros(n_scales, hidden))
        self.head = tc.Linear(hidden * (height // 4) * (width // 4), latent_dim)

    def encode_scale(self, residual: torch.Tensor, k) -> torch.Tensor:
        """Latent vector(s) of dimension d for residual(s) at scale ``k`` (int or per-sample tensor)."""
        k_idx = torch.as_tensor(k, dtype=torch.long)
        if k_idx.numel() and (int(k_idx.min()) < 1 or int(k_idx.max()) > self.n_scales):
            raise ValueError(f"scale index outside 1..{self.n_scales}")
        h = self.block1(residual)
        emb = self.scale_embedding[k_idx - 1]
        h = h + emb[..., :, None, None]
        h = self.block2(h)
        return self.head(h.flatten(-3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_all(x)

    def encode_pyramid(self, pyramid: ScalePyramid) -> torch.Tensor:
        """``[B, K, C, H, W]`` residuals to ``[B, K, d]`` latents."""
        r = pyramid.residuals
        b, K = r.shape[0], r.shape[1]
        ks = torch.arange(1, K + 1).repeat(b)
        z = self.encode_scale(r.reshape(b * K, *r.shape[2:]), ks)
        return z.reshape(b, K, self.latent_dim)

    def encode_all(self, x: torch.Tensor) -> torch.Tensor:
        """Decompose a batch of snapshots ``[B, C, H, W]`` and encode each scale: ``[B, K, d]``."""
        return self.encode_pyramid(decompose_residuals(x, self.n_scales, self.progression, self.interp))
