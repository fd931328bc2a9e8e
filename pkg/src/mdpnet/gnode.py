"""Cross-scale latent dynamics on the fully connected scale graph.

``dz^k/dt = f(z^k, emb_k) + sum_j a_kj W z^j`` where ``f`` is a shared
two-layer MLP and ``a_kj`` are single-head additive graph-attention weights.
Integration backpropagates through the solver steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import tensor_core as tc


@dataclass
class ODESolverConfig:
    method: str = "rk4"          # "rk4" or "dopri5"
    step_size: float = 0.25
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown ODE method {self.method!r}")
        if self.step_size <= 0 or self.rtol <= 0 or self.atol <= 0 or self.max_steps < 1:
            raise ValueError("solver step size, tolerances and max_steps must be positive")


class SolverError(RuntimeError):
    pass


class GNODE(torch.nn.Module):
    def __init__(self, latent_dim: int, n_scales: int, hidden: int = 32, embed_dim: int | None = None,
                 interaction: bool = True):
        super().__init__()
        embed_dim = embed_dim or latent_dim
        self.n_scales = n_scales
        self.latent_dim = latent_dim
        self.interaction_enabled = interaction
        self.scale_embedding = torch.nn.Parameter(torch.zeros(n_scales, embed_dim))
        self.fc1 = tc.Linear(latent_dim + embed_dim, hidden)
        self.fc2 = tc.Linear(hidden, latent_dim)
        self.W = tc.Linear(latent_dim, latent_dim, bias=False)
        self.att_src = torch.nn.Parameter(torch.zeros(latent_dim))
        self.att_dst = torch.nn.Parameter(torch.zeros(latent_dim))
        self.register_buffer("adjacency", torch.ones(n_scales, n_scales), persistent=False)

    def self_dynamics(self, z: torch.Tensor, k) -> torch.Tensor:
        """``xi([z, emb_k])`` for latent(s) ``z`` at scale(s) ``k`` (1-based)."""
        k_idx = torch.as_tensor(k, dtype=torch.long)
        if k_idx.numel() and (int(k_idx.min()) < 1 or int(k_idx.max()) > self.n_scales):
            raise ValueError(f"scale index outside 1..{self.n_scales}")
        emb = self.scale_embedding[k_idx - 1].expand(*z.shape[:-1], -1)
        return self.fc2(tc.silu(self.fc1(torch.cat([z, emb], dim=-1))))

    def attention(self, Z: torch.Tensor) -> torch.Tensor:
        """Row-stochastic ``[.., K, K]`` weights: softmax_j LeakyReLU(a_dst.Wz_i + a_src.Wz_j)."""
        h = self.W(Z)
        logits = (h @ self.att_dst)[..., :, None] + (h @ self.att_src)[..., None, :]
        logits = F.leaky_relu(logits, 0.2)
        logits = logits.masked_fill(self.adjacency == 0, float("-inf"))
        return torch.softmax(logits, dim=-1)

    def interaction(self, Z: torch.Tensor) -> torch.Tensor:
        return self.attention(Z) @ self.W(Z)

    def forward(self, t, Z: torch.Tensor) -> torch.Tensor:
        return self.ode_rhs(Z)

    def ode_rhs(self, Z: torch.Tensor) -> torch.Tensor:
        if Z.shape[-2:] != (self.n_scales, self.latent_dim):
            raise tc.ShapeError(f"latent shape {tuple(Z.shape)} != (.., {self.n_scales}, {self.latent_dim})")
        ks = torch.arange(1, self.n_scales + 1)
        out = self.self_dynamics(Z, ks.expand(Z.shape[:-1]))
        if self.interaction_enabled:
            out = out + self.interaction(Z)
        return out


def rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + h / 2 * k1)
    k3 = rhs(t + h / 2, y + h / 2 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def _dopri_step(rhs, t, y, h, k1):
    ks = [k1]
    for i in range(1, 7):
        yi = y + h * sum(a * k for a, k in zip(_DP_A[i], ks) if a != 0.0)
        ks.append(rhs(t + _DP_C[i] * h, yi))
    y5 = y + h * sum(b * k for b, k in zip(_DP_B5, ks) if b != 0.0)
    y4 = y + h * sum(b * k for b, k in zip(_DP_B4, ks) if b != 0.0)
    return y5, y5 - y4, ks[-1]


def _integrate_dopri(rhs, y0, times, cfg: ODESolverConfig):
    out = []
    t, y = 0.0, y0
    k1 = rhs(t, y)
    h = min(cfg.step_size, max(times) if times and max(times) > 0 else cfg.step_size)
    steps = 0
    for t_out in times:
        while t < t_out - 1e-12:
            if steps >= cfg.max_steps:
                raise SolverError(f"adaptive solver exceeded {cfg.max_steps} steps at t={t:.6g}")
            h_try = min(h, t_out - t)
            y_new, err, k_last = _dopri_step(rhs, t, y, h_try, k1)
            with torch.no_grad():
                scale = cfg.atol + cfg.rtol * torch.maximum(y.abs(), y_new.abs())
                err_norm = float(torch.sqrt(torch.mean((err / scale) ** 2)))
            steps += 1
            if err_norm <= 1.0:
                t, y, k1 = t + h_try, y_new, k_last
            factor = 0.9 * err_norm ** -0.2 if err_norm > 0 else 5.0
            h = h_try * min(5.0, max(0.2, factor))
        out.append(y)
    return out


def integrate(rhs, Z0: torch.Tensor, times, solver: ODESolverConfig | None = None) -> torch.Tensor:
    """Solve ``dZ/dt = rhs(t, Z)`` from ``t = 0``; returns states at each of ``times`` stacked on axis 0.

    ``times`` must be non-decreasing and non-negative. A scalar ``times``
    returns the single final state.
    """
    solver = solver or ODESolverConfig()
    scalar = not isinstance(times, (list, tuple))
    ts = [float(times)] if scalar else [float(t) for t in times]
    if any(t < 0 for t in ts) or any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"integration times must be non-negative and sorted, got {ts}")
    if solver.method == "dopri5":
        out = _integrate_dopri(rhs, Z0, ts, solver)
    else:
        out, t, y = [], 0.0, Z0
        for t_out in ts:
            span = t_out - t
            if span > 0:
                n = max(1, int(-(-span // solver.step_size)))
                if n > solver.max_steps:
                    raise SolverError(f"RK4 would need {n} steps (max {solver.max_steps})")
                h = span / n
                for i in range(n):
                    y = rk4_step(rhs, t + i * h, y, h)
                t = t_out
            out.append(y)
    return out[0] if scalar else torch.stack(out)


def pred_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over scales and latent dimensions."""
    if predicted.shape != target.shape:
        raise tc.ShapeError(f"{tuple(predicted.shape)} vs {tuple(target.shape)}")
    return ((predicted - target) ** 2).mean()
