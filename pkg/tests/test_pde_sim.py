import math

import numpy as np
import pytest

from mdpnet import pde_sim as ps


def run_steps(cfg, u, v, n):
    frames = [(u, v)]
    for _ in range(n):
        u, v = ps.rd_step(cfg, u, v, cfg.dt / cfg.substeps)
        frames.append((u, v))
    return frames


def test_laplacian_matches_discrete_eigenvalue():
    n, dx = 16, 0.5
    x = np.arange(n) * dx
    k = 2 * np.pi * 3 / (n * dx)
    field = np.sin(k * x)[None, :] * np.ones((n, 1))
    expected = (2 * np.cos(k * dx) - 2) / dx ** 2 * field
    np.testing.assert_allclose(ps.laplacian_periodic(field, dx), expected, atol=1e-12)
    assert np.abs(ps.laplacian_periodic(np.full((5, 7), 2.5))).max() == 0


def test_brusselator_fixed_point():
    cfg = ps.default_config("Bruss", height=8, width=8)
    u = np.full((8, 8), cfg.alpha)
    v = np.full((8, 8), cfg.beta / cfg.alpha)
    drift = max(max(np.abs(a - cfg.alpha).max(), np.abs(b - cfg.beta / cfg.alpha).max())
                for a, b in run_steps(cfg, u, v, 100))
    assert drift <= 1e-8


def test_brusselator_perturbation_grows():
    # beta > 1 + alpha^2: the homogeneous state is unstable
    cfg = ps.default_config("Bruss", height=8, width=8)
    rng = np.random.default_rng(0)
    du, dv = 1e-4 * rng.standard_normal((8, 8)), 1e-4 * rng.standard_normal((8, 8))
    frames = run_steps(cfg, cfg.alpha + du, cfg.beta / cfg.alpha + dv, 50)
    u, v = frames[-1]
    grown = np.hypot(u - cfg.alpha, v - cfg.beta / cfg.alpha)
    assert np.linalg.norm(grown) > np.linalg.norm(np.hypot(du, dv))


def test_gray_scott_fixed_point():
    cfg = ps.default_config("GS", height=10, width=10)
    frames = run_steps(cfg, np.ones((10, 10)), np.zeros((10, 10)), 100)
    assert max(max(np.abs(a - 1).max(), np.abs(b).max()) for a, b in frames) <= 1e-12


def test_lambda_omega_limit_cycle():
    cfg = ps.default_config("LO", height=6, width=6)
    theta0 = 0.7
    u, v = np.full((6, 6), math.cos(theta0)), np.full((6, 6), math.sin(theta0))
    frames = run_steps(cfg, u, v, 100)
    assert max(np.abs(np.hypot(a, b) - 1).max() for a, b in frames) <= 1e-6
    # on the cycle the phase rotates at -beta
    a, b = frames[-1]
    t = 100 * cfg.dt
    np.testing.assert_allclose(a, math.cos(theta0 - cfg.beta * t), atol=1e-9)
    np.testing.assert_allclose(b, math.sin(theta0 - cfg.beta * t), atol=1e-9)


def test_lambda_omega_reaction_flow_matches_ode():
    # radius ODE r' = (1 - r^2) r has the closed form s(t) = s0 e^{2t} / (s0 e^{2t} + 1 - s0)
    u, v = np.array([0.3, 1.5]), np.array([0.4, -0.2])
    s0 = u ** 2 + v ** 2
    a, b = ps.lambda_omega_reaction_flow(u, v, 1.0, 0.5)
    expected = s0 * math.e / (s0 * math.e + 1 - s0)
    np.testing.assert_allclose(a ** 2 + b ** 2, expected, rtol=1e-12)


def test_reaction_terms_vanish_at_fixed_points():
    assert ps.reaction_terms("Bruss", 1.0, 3.0, 1.0, 3.0) == (0.0, 0.0)
    assert ps.reaction_terms("GS", 1.0, 0.0, 0.04, 0.1) == (0.0, 0.0)


@pytest.mark.parametrize("system", ["LO", "Bruss", "GS"])
def test_simulation_is_seeded(system):
    cfg = ps.default_config(system, height=12, width=12, out_height=None, out_width=None)
    cfg = ps.with_seed(cfg, 4)
    a = ps.simulate_reaction_diffusion(cfg, n_steps=20, record_every=5)
    b = ps.simulate_reaction_diffusion(cfg, n_steps=20, record_every=5)
    c = ps.simulate_reaction_diffusion(ps.with_seed(cfg, 5), n_steps=20, record_every=5)
    assert a.states.shape == (4, 2, 12, 12) and a.states.dtype == np.float32
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)
    assert a.record_dt == pytest.approx(5 * cfg.dt)


def test_gray_scott_stays_bounded_and_resizes():
    cfg = ps.default_config("GS", height=20, width=20, out_height=8, out_width=8, dx=0.025)
    traj = ps.simulate_gray_scott(cfg, n_steps=10, record_every=2)
    assert traj.states.shape == (5, 2, 8, 8)
    assert traj.states.min() > -0.5 and traj.states.max() < 1.5


def test_blow_up_is_reported():
    cfg = ps.default_config("Bruss", height=8, width=8, dt=5.0, T=500.0)
    with pytest.raises(ps.SimulationError):
        ps.simulate_brusselator(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ps.SimConfig(system="KS")
    with pytest.raises(ValueError):
        ps.default_config("Bruss", dt=0.0)
    with pytest.raises(ValueError):
        ps.simulate_lambda_omega(ps.default_config("Bruss"))
    with pytest.raises(ValueError):
        ps.CylinderConfig(reynolds=50)


def test_downsample_time():
    traj = ps.Trajectory(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), {}, 0.5)
    sub = ps.downsample_time(traj, 3)
    assert sub.states.ravel().tolist() == [0, 3, 6, 9]
    assert sub.record_dt == 1.5
    with pytest.raises(ValueError):
        ps.downsample_time(traj, 11)


def test_non_finite_trajectory_rejected():
    with pytest.raises(ps.SimulationError):
        ps.Trajectory(np.array([np.nan], dtype=np.float32))


# lattice Boltzmann

def random_populations(rng, shape=(5, 4)):
    rho = 1 + 0.1 * rng.random(shape)
    u = 0.05 * rng.standard_normal((2, *shape))
    return ps.equilibrium(rho, u) * (1 + 0.05 * rng.standard_normal((9, *shape)))


def test_equilibrium_moments(rng):
    rho = 1 + 0.1 * rng.random((3, 3))
    u = 0.05 * rng.standard_normal((2, 3, 3))
    feq = ps.equilibrium(rho, u)
    np.testing.assert_allclose(feq.sum(0), rho, atol=1e-14)
    momentum = np.einsum("id,ixy->dxy", ps.LATTICE.astype(float), feq)
    np.testing.assert_allclose(momentum, rho * u, atol=1e-14)


def test_bgk_collision_conserves_mass_and_momentum(rng):
    f = random_populations(rng)
    post = ps.bgk_collide(f, 0.6)
    c = ps.LATTICE.astype(float)
    assert np.abs(post.sum(0) - f.sum(0)).max() <= 1e-12
    assert np.abs(np.einsum("id,ixy->dxy", c, post) - np.einsum("id,ixy->dxy", c, f)).max() <= 1e-12


def test_streaming_preserves_totals(rng):
    f = random_populations(rng)
    g = ps.stream(f)
    np.testing.assert_allclose(g.sum(axis=(1, 2)), f.sum(axis=(1, 2)), rtol=1e-14)
    assert g[1, 1, 0] == f[1, 0, 0]


def test_cylinder_parameters():
    cfg = ps.CylinderConfig(reynolds=200, nx=90, ny=36)
    assert cfg.viscosity == pytest.approx(1.0 * 0.08 * 0.2 / 200)
    assert cfg.tau == pytest.approx(3 * 0.08 * 2 * 4.0 / 200 + 0.5)


def test_cylinder_short_run():
    cfg = ps.CylinderConfig(reynolds=100, nx=60, ny=24, warmup_steps=20, n_records=3, downsample=5,
                            out_height=8, out_width=16)
    traj = ps.simulate_cylinder_lbm(cfg)
    assert traj.states.shape == (3, 2, 8, 16)
    assert traj.record_dt == 5.0
    again = ps.simulate_cylinder_lbm(cfg)
    assert np.array_equal(traj.states, again.states)
    sim = ps.CylinderFlow(cfg)
    assert np.all(sim.velocity()[:, sim.obstacle.T] == 0)
