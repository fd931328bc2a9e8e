"""Differentiable array primitives and the Adam optimizer.

Every learned component in the package is built from the functions here.
Arrays are ``torch.Tensor`` values (float32 by default); reverse-mode
gradients come from torch autograd. Each op validates its shape contract and
accepts an optional leading batch axis on top of the documented shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.optim.adam import adam as _adam_functional

DTYPE = torch.float32


class ShapeError(ValueError):
    """Raised when an op receives arrays whose extents violate its contract."""


def _as_batched(x: torch.Tensor, rank: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == rank:
        return x.unsqueeze(0), True
    if x.dim() == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {tuple(x.shape)}")


def conv2d(input: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-correlation with zero "same" padding. Kernel extents must be odd."""
    x, squeeze = _as_batched(input, 3)
    if kernel.dim() != 4:
        raise ShapeError(f"kernel must be [C_out, C_in, kh, kw], got {tuple(kernel.shape)}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {x.shape[1]}")
    out = F.conv2d(x, kernel, bias, padding=(kh // 2, kw // 2))
    return out[0] if squeeze else out


def avg_pool2d(input: torch.Tensor, factor: int) -> torch.Tensor:
    x, squeeze = _as_batched(input, 3)
    if factor < 1:
        raise ShapeError(f"pool factor must be positive, got {factor}")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"pool factor {factor} does not divide extents {h}x{w}")
    out = F.avg_pool2d(x, factor) if factor > 1 else x
    return out[0] if squeeze else out


def upsample_bilinear(input: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize with half-pixel-center alignment."""
    x, squeeze = _as_batched(input, 3)
    h, w = x.shape[-2:]
    if min(h, w, out_h, out_w) <= 0:
        raise ShapeError("zero spatial extent")
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        out = x
    else:
        out = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def linear(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if input.shape[-1] != weight.shape[1]:
        raise ShapeError(f"trailing extent {input.shape[-1]} != weight d_in {weight.shape[1]}")
    return F.linear(input, weight, bias)


def group_norm(input: torch.Tensor, groups: int, gain: torch.Tensor | None = None,
               shift: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    x, squeeze = _as_batched(input, 3)
    if groups < 1 or x.shape[1] % groups:
        raise ShapeError(f"{groups} groups do not divide {x.shape[1]} channels")
    out = F.group_norm(x, groups, gain, shift, eps)
    return out[0] if squeeze else out


def silu(input: torch.Tensor) -> torch.Tensor:
    return F.silu(input)


def attention_weights(queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"query dk {queries.shape[-1]} != key dk {keys.shape[-1]}")
    logits = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    return torch.softmax(logits, dim=-1)


def scaled_dot_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(dk)) V over the last two axes."""
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    return attention_weights(queries, keys) @ values


def backward(loss: torch.Tensor, params: list[torch.Tensor], create_graph: bool = False) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss; unreachable parameters get zeros."""
    if loss.numel() != 1:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True, create_graph=create_graph)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[torch.Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
        return state


@torch.no_grad()
def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``."""
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.exp_avg)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in adam_step: {tuple(p.shape)} vs {tuple(g.shape)}")
    state.step += 1
    steps = [torch.tensor(float(state.step - 1)) for _ in params]
    _adam_functional(
        [p.data for p in params], [g.detach() for g in grads], state.exp_avg, state.exp_avg_sq, [], steps,
        foreach=False, amsgrad=False, beta1=state.beta1, beta2=state.beta2, lr=state.lr,
        weight_decay=0.0, eps=state.eps, maximize=False,
    )


def init_uniform_(weight: torch.Tensor, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=generator, dtype=weight.dtype) * 2 * bound - bound)
    return weight


def init_module_(module: torch.nn.Module, seed: int) -> torch.nn.Module:
    """Seeded fan-in uniform weights and zero biases for every conv/linear layer."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "bias" or leaf == "shift":
            with torch.no_grad():
                p.zero_()
        elif leaf == "gain":
            with torch.no_grad():
                p.fill_(1.0)
        elif p.dim() >= 2:
            fan_in = p[0].numel()
            init_uniform_(p, fan_in, gen)
        else:
            init_uniform_(p, p.numel(), gen)
    return module


class Conv2d(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, size: int = 3, bias: bool = True):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.empty(c_out, c_in, size, size))
        self.bias = torch.nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


class Linear(torch.nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.empty(d_out, d_in))
        self.bias = torch.nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class GroupNorm(torch.nn.Module):
    def __init__(self, channels: int, groups: int | None = None):
        super().__init__()
        self.groups = groups or _default_groups(channels)
        self.gain = torch.nn.Parameter(torch.ones(channels))
        self.shift = torch.nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.gain, self.shift)


def _default_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1
