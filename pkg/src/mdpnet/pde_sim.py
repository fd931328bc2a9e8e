"""Ground-truth trajectory generators.

Reaction-diffusion systems (Lambda-Omega, Brusselator, Gray-Scott) run on
periodic grids with a 5-point Laplacian; cylinder flow runs a D2Q9 BGK
lattice-Boltzmann solver. All integration is float64; trajectories are
exported as float32 ``[T, C, H, W]`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

BLOWUP = 1e6
SYSTEMS = ("LO", "Bruss", "GS", "Cylinder")


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    system: str = "Bruss"
    mu_u: float = 1.0
    mu_v: float = 0.1
    alpha: float = 1.0
    beta: float = 3.0
    dt: float = 0.02
    T: float = 20.0
    downsample: int = 10
    height: int = 64
    width: int = 64
    dx: float = 1.0
    substeps: int = 1             # internal Euler steps per dt
    out_height: int | None = None  # spatial interpolation of the exported fields
    out_width: int | None = None
    ic_amplitude: float = 0.2
    ic_smoothing: float = 3.0     # gaussian low-pass width in cells
    seed: int = 0

    def __post_init__(self):
        if self.system not in ("LO", "Bruss", "GS"):
            raise ValueError(f"unknown reaction-diffusion system {self.system!r}")
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")
        if self.height < 4 or self.width < 4:
            raise ValueError("grid extents must be >= 4")
        if self.downsample < 1 or self.substeps < 1:
            raise ValueError("downsample and substeps must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


# Coefficients and settings per system. GS integrates dt=50 as 50 internal
# steps of 1 because a single explicit step of 50 is unstable for beta=0.1.
TABLE_DEFAULTS = {
    "LO": dict(mu_u=0.1, mu_v=0.1, alpha=0.0, beta=1.0, dt=0.04, T=40.0, height=64, width=64,
               downsample=10, dx=0.5, ic_amplitude=1.0),
    "Bruss": dict(mu_u=1.0, mu_v=0.1, alpha=1.0, beta=3.0, dt=0.02, T=20.0, height=64, width=64,
                  downsample=10, dx=1.0, ic_amplitude=0.2),
    "GS": dict(mu_u=2e-5, mu_v=1e-5, alpha=0.04, beta=0.1, dt=50.0, T=5e3, height=100, width=100,
               downsample=1, dx=0.025, substeps=50, out_height=64, out_width=64, ic_amplitude=0.01),
}


def default_config(system: str, **overrides) -> SimConfig:
    if system not in TABLE_DEFAULTS:
        raise ValueError(f"unknown reaction-diffusion system {system!r}")
    return SimConfig(system=system, **{**TABLE_DEFAULTS[system], **overrides})


@dataclass
class Trajectory:
    states: np.ndarray                 # [T, C, H, W] float32
    config: dict = field(default_factory=dict)
    record_dt: float = 1.0             # physical time between stored snapshots

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise SimulationError("trajectory contains non-finite values")

    def __len__(self):
        return self.states.shape[0]


def laplacian_periodic(field: np.ndarray, dx: float = 1.0) -> np.ndarray:
    """5-point Laplacian over the last two axes with periodic wrap."""
    return (np.roll(field, 1, -1) + np.roll(field, -1, -1) + np.roll(field, 1, -2)
            + np.roll(field, -1, -2) - 4.0 * field) / (dx * dx)


def smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Gaussian noise low-pass filtered with periodic wrap, rescaled to max |value| = 1."""
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return noise / max(np.abs(noise).max(), 1e-12)


def initial_condition(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.height, cfg.width)
    if cfg.system == "LO":
        return (cfg.ic_amplitude * smooth_noise(rng, shape, cfg.ic_smoothing),
                cfg.ic_amplitude * smooth_noise(rng, shape, cfg.ic_smoothing))
    if cfg.system == "Bruss":
        u0, v0 = cfg.alpha, cfg.beta / cfg.alpha
        return (u0 + cfg.ic_amplitude * smooth_noise(rng, shape, cfg.ic_smoothing),
                v0 + cfg.ic_amplitude * smooth_noise(rng, shape, cfg.ic_smoothing))
    # GS: square perturbations of the (1, 0) state
    u, v = np.ones(shape), np.zeros(shape)
    side = max(2, min(shape) // 10)
    for _ in range(rng.integers(3, 8)):
        i, j = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        rows = np.arange(i, i + side) % shape[0]
        cols = np.arange(j, j + side) % shape[1]
        u[np.ix_(rows, cols)] = 0.5
        v[np.ix_(rows, cols)] = 0.25
    u += cfg.ic_amplitude * rng.standard_normal(shape)
    v += cfg.ic_amplitude * rng.standard_normal(shape)
    return u, v


def lambda_omega_reaction_flow(u, v, beta: float, t: float):
    """Exact flow of ``r' = (1 - r^2) r``, ``theta' = -beta r^2`` over time ``t``."""
    s0 = u * u + v * v
    theta0 = np.arctan2(v, u)
    e = math.exp(2.0 * t)
    s = s0 * e / (s0 * e + 1.0 - s0)
    theta = theta0 - 0.5 * beta * np.log(s0 * e + 1.0 - s0)
    r = np.sqrt(s)
    return r * np.cos(theta), r * np.sin(theta)


def reaction_terms(system: str, u, v, alpha: float, beta: float):
    if system == "Bruss":
        uuv = u * u * v
        return alpha - (1.0 + beta) * u + uuv, beta * u - uuv
    if system == "GS":
        uvv = u * v * v
        return -uvv + alpha * (1.0 - u), uvv - beta * v
    r2 = u * u + v * v
    return (1.0 - r2) * u + beta * r2 * v, (1.0 - r2) * v - beta * r2 * u


def rd_step(cfg: SimConfig, u, v, h: float, reaction: bool = True):
    """Advance one step of size ``h``.

    Brusselator and Gray-Scott use explicit Euler. Lambda-Omega takes an Euler
    diffusion step followed by the exact reaction flow (first-order splitting),
    which keeps homogeneous states on the analytic limit cycle.
    """
    du = cfg.mu_u * laplacian_periodic(u, cfg.dx)
    dv = cfg.mu_v * laplacian_periodic(v, cfg.dx)
    if cfg.system == "LO":
        u, v = u + h * du, v + h * dv
        return lambda_omega_reaction_flow(u, v, cfg.beta, h) if reaction else (u, v)
    if reaction:
        ru, rv = reaction_terms(cfg.system, u, v, cfg.alpha, cfg.beta)
        du, dv = du + ru, dv + rv
    return u + h * du, v + h * dv


def simulate_reaction_diffusion(cfg: SimConfig, reaction: bool = True, initial=None,
                                n_steps: int | None = None, record_every: int | None = None) -> Trajectory:
    """Integrate ``n_steps`` (default ``T/dt``) steps of ``dt``, storing every ``record_every``-th state
    (default ``cfg.downsample``) starting from the initial one."""
    u, v = initial if initial is not None else initial_condition(cfg)
    u, v = np.array(u, dtype=np.float64), np.array(v, dtype=np.float64)
    n_steps = cfg.steps if n_steps is None else n_steps
    every = cfg.downsample if record_every is None else record_every
    h = cfg.dt / cfg.substeps
    frames = []
    for step in range(n_steps):
        if step % every == 0:
            frames.append(np.stack([u, v]))
        for _ in range(cfg.substeps):
            u, v = rd_step(cfg, u, v, h, reaction)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))) or \
                max(np.abs(u).max(), np.abs(v).max()) > BLOWUP:
            raise SimulationError(f"{cfg.system} blew up at step {step + 1} (t={(step + 1) * cfg.dt:.4g})")
    if not frames:
        frames.append(np.stack([u, v]))
    states = np.stack(frames)
    if cfg.out_height and cfg.out_width and (cfg.out_height, cfg.out_width) != (cfg.height, cfg.width):
        states = resize_fields(states, cfg.out_height, cfg.out_width)
    return Trajectory(states.astype(np.float32), asdict(cfg), cfg.dt * every)


def resize_fields(states: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear spatial interpolation of ``[.., H, W]`` fields."""
    zoom = [1.0] * (states.ndim - 2) + [height / states.shape[-2], width / states.shape[-1]]
    return ndimage.zoom(states, zoom, order=1, mode="grid-wrap", grid_mode=True)


def simulate_lambda_omega(cfg: SimConfig, **kw) -> Trajectory:
    return simulate_reaction_diffusion(_check_system(cfg, "LO"), **kw)


def simulate_brusselator(cfg: SimConfig, **kw) -> Trajectory:
    return simulate_reaction_diffusion(_check_system(cfg, "Bruss"), **kw)


def simulate_gray_scott(cfg: SimConfig, **kw) -> Trajectory:
    return simulate_reaction_diffusion(_check_system(cfg, "GS"), **kw)


def _check_system(cfg: SimConfig, system: str) -> SimConfig:
    if cfg.system != system:
        raise ValueError(f"config is for {cfg.system}, expected {system}")
    return cfg


def downsample_time(traj: Trajectory, factor: int) -> Trajectory:
    """Keep every ``factor``-th snapshot starting at index 0."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor > len(traj):
        raise ValueError(f"downsample factor {factor} exceeds trajectory length {len(traj)}")
    return Trajectory(traj.states[::factor].copy(), dict(traj.config), traj.record_dt * factor)


# ---------------------------------------------------------------------------
# D2Q9 lattice Boltzmann

LATTICE = np.array([(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)])
WEIGHTS = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)
OPPOSITE = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6])
_RIGHTWARD = LATTICE[:, 0] == 1
_LEFTWARD = LATTICE[:, 0] == -1
_VERTICAL = LATTICE[:, 0] == 0


@dataclass
class CylinderConfig:
    reynolds: float = 100.0
    rho: float = 1.0
    inflow_speed: float = 0.08      # U_m, also the lattice inflow speed
    diameter: float = 0.2           # physical D, used for the reported viscosity
    nx: int = 420
    ny: int = 180
    radius_cells: float | None = None   # default ny / 9
    warmup_steps: int = 20_000
    n_records: int = 100
    downsample: int = 300
    out_height: int | None = None
    out_width: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 100.0 <= self.reynolds <= 1000.0:
            raise ValueError(f"Reynolds number {self.reynolds} outside [100, 1000]")
        if self.nx < 4 or self.ny < 4:
            raise ValueError("lattice extents must be >= 4")

    @property
    def viscosity(self) -> float:
        """Physical viscosity ``rho * U_m * D / Re``."""
        return self.rho * self.inflow_speed * self.diameter / self.reynolds

    @property
    def radius(self) -> float:
        return self.radius_cells if self.radius_cells is not None else self.ny / 9.0

    @property
    def lattice_viscosity(self) -> float:
        return self.inflow_speed * 2.0 * self.radius / self.reynolds

    @property
    def tau(self) -> float:
        return 3.0 * self.lattice_viscosity + 0.5


def equilibrium(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    """D2Q9 equilibrium ``[9, ...]`` for density ``[...]`` and velocity ``[2, ...]``."""
    cu = 3.0 * np.tensordot(LATTICE.astype(np.float64), u, axes=(1, 0))
    usq = 1.5 * (u[0] ** 2 + u[1] ** 2)
    return rho * WEIGHTS.reshape((9,) + (1,) * rho.ndim) * (1.0 + cu + 0.5 * cu * cu - usq)


def macroscopic(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rho = f.sum(axis=0)
    u = np.tensordot(LATTICE.T.astype(np.float64), f, axes=(1, 0)) / rho
    return rho, u


def bgk_collide(f: np.ndarray, tau: float) -> np.ndarray:
    rho, u = macroscopic(f)
    return f - (f - equilibrium(rho, u)) / tau


def stream(f: np.ndarray) -> np.ndarray:
    """Shift each population along its lattice velocity; arrays are ``[9, nx, ny]``, periodic wrap."""
    return np.stack([np.roll(f[i], tuple(LATTICE[i]), axis=(0, 1)) for i in range(9)])


class CylinderFlow:
    """Channel flow past a cylinder: equilibrium-corrected inflow on the left,
    zero-gradient outflow on the right, periodic top/bottom, full-way bounce-back
    on the obstacle."""

    def __init__(self, cfg: CylinderConfig):
        if cfg.tau <= 0.5:
            raise SimulationError(f"relaxation time {cfg.tau:.4f} <= 0.5 is unstable")
        self.cfg = cfg
        x, y = np.meshgrid(np.arange(cfg.nx), np.arange(cfg.ny), indexing="ij")
        cx, cy = cfg.nx / 4.0, cfg.ny / 2.0
        self.obstacle = (x - cx) ** 2 + (y - cy) ** 2 < cfg.radius ** 2
        # inflow with a small transverse modulation to break the symmetry
        rng = np.random.default_rng(cfg.seed)
        phase = rng.uniform(0, 2 * np.pi)
        self.inflow = np.zeros((2, cfg.nx, cfg.ny))
        self.inflow[0] = cfg.inflow_speed * (1.0 + 1e-4 * np.sin(2 * np.pi * y / (cfg.ny - 1) + phase))
        self.f = equilibrium(np.ones((cfg.nx, cfg.ny)), self.inflow)

    def step(self):
        f, cfg = self.f, self.cfg
        f[_LEFTWARD, -1, :] = f[_LEFTWARD, -2, :]
        rho, u = macroscopic(f)
        u[:, 0, :] = self.inflow[:, 0, :]
        rho[0, :] = (f[_VERTICAL, 0, :].sum(axis=0) + 2.0 * f[_LEFTWARD, 0, :].sum(axis=0)) / (1.0 - u[0, 0, :])
        feq = equilibrium(rho, u)
        right = np.flatnonzero(_RIGHTWARD)
        f[right, 0, :] = feq[right, 0, :] + f[OPPOSITE[right], 0, :] - feq[OPPOSITE[right], 0, :]
        post = f - (f - feq) / cfg.tau
        for i in range(9):
            post[i, self.obstacle] = f[OPPOSITE[i], self.obstacle]
        self.f = stream(post)

    def velocity(self) -> np.ndarray:
        """Velocity field ``[2, ny, nx]`` (rows are y); zero inside the obstacle."""
        _, u = macroscopic(self.f)
        u[:, self.obstacle] = 0.0
        return u.transpose(0, 2, 1)


def simulate_cylinder_lbm(cfg: CylinderConfig) -> Trajectory:
    sim = CylinderFlow(cfg)
    for _ in range(cfg.warmup_steps):
        sim.step()
    frames = []
    for i in range(cfg.n_records * cfg.downsample):
        if i % cfg.downsample == 0:
            frames.append(sim.velocity())
        sim.step()
        if not np.all(np.isfinite(sim.f)):
            raise SimulationError(f"LBM diverged at recorded step {i} (tau={cfg.tau:.4f})")
    states = np.stack(frames)
    if cfg.out_height and cfg.out_width:
        states = resize_fields(states, cfg.out_height, cfg.out_width)
    meta = asdict(cfg) | {"viscosity": cfg.viscosity, "tau": cfg.tau}
    return Trajectory(states.astype(np.float32), meta, float(cfg.downsample))


def with_seed(cfg, seed: int):
    return replace(cfg, seed=seed)
