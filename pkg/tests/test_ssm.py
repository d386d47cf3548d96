import math

import numpy as np
import pytest

from fluid.gaussian import LinearSSM
from fluid.grad import ConfigurationError
from fluid.io import load_dataset, save_dataset
from fluid.ssm import (
    AdvDiffSpec, BurgersSolver, BurgersSpec, LorenzSpec, SimulationError, SVSpec, build_advdiff,
    choose_fine_step, fine_step_matrix, integrate_lorenz, make_dataset, simulate_burgers, simulate_linear,
    simulate_lorenz, spec_from_dict, stability_bound,
)

from oracles import burgers_reference, rk4_lorenz


# ---------------------------------------------------------------- advection-diffusion
def test_zero_velocity_gives_identity_step():
    np.testing.assert_array_equal(fine_step_matrix(AdvDiffSpec(n=4, a=0.0), 0.01), np.eye(4))


def test_case1_defaults():
    spec = AdvDiffSpec.case1()
    assert (spec.n, spec.dt_obs, spec.q, spec.r, spec.sigma) == (10, 0.05, 0.01, 0.1, 0.05)
    ssm = build_advdiff(spec)
    np.testing.assert_allclose(ssm.Q, 0.01 * np.eye(10))
    np.testing.assert_allclose(ssm.R, 0.1 * np.eye(5))
    np.testing.assert_allclose(ssm.Sigma, 0.0025 * np.eye(10))
    np.testing.assert_allclose(ssm.mu, np.sin(2 * np.pi * np.arange(10) / 10))
    assert np.array_equal(np.nonzero(ssm.H)[1], np.arange(0, 10, 2))


def test_upwind_rows_sum_to_one_and_match_backward_difference():
    spec = AdvDiffSpec.case1()
    dt = choose_fine_step(spec)
    Mf = fine_step_matrix(spec, dt)
    np.testing.assert_allclose(Mf.sum(axis=1), 1.0, atol=1e-14)
    nu = dt * spec.n
    A = np.eye(10) - np.roll(np.eye(10), -1, axis=1)
    np.testing.assert_allclose(Mf, np.eye(10) - nu * A, atol=1e-14)
    assert np.allclose(A @ np.arange(10.0), [-9] + [1] * 9)


def test_cfl_violation_reports_bound():
    spec = AdvDiffSpec(n=10, dt_obs=0.2, dt_fine=0.2)
    with pytest.raises(ConfigurationError, match="largest stable step is 0.1"):
        build_advdiff(spec)
    assert stability_bound(spec) == pytest.approx(0.1, rel=1e-9)


def test_fine_step_is_largest_stable_power_of_two():
    spec = AdvDiffSpec(n=40, dt_obs=0.05)
    dt = choose_fine_step(spec)
    assert dt == pytest.approx(0.05 / 2)
    assert dt <= stability_bound(spec) < 2 * dt


@pytest.mark.parametrize("n", [16, 32, 48, 64])
def test_case2_structure(n):
    spec = AdvDiffSpec.case2(n=n)
    ssm = build_advdiff(spec)
    assert ssm.H.shape == (8, n)
    np.testing.assert_allclose(ssm.H.sum(axis=1), 1.0)
    assert spec.sigma == pytest.approx(0.05 / n)
    np.testing.assert_allclose(ssm.Q, ssm.Q.T)
    assert np.linalg.eigvalsh(ssm.Q).min() > 0
    assert np.abs(np.linalg.eigvals(ssm.M)).max() <= 1 + 1e-10


def test_case2_noise_accumulates_fine_steps():
    spec = AdvDiffSpec.case2(n=16)
    dt = choose_fine_step(spec)
    m = round(spec.dt_obs / dt)
    Mf = fine_step_matrix(spec, dt)
    Q = sum(np.linalg.matrix_power(Mf, i) @ (dt / 16 * np.eye(16)) @ np.linalg.matrix_power(Mf, i).T for i in range(m))
    np.testing.assert_allclose(build_advdiff(spec).Q, Q, atol=1e-15)


def test_deterministic_linear_trajectories_are_powers_of_M():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(3, 3)) * 0.4
    ssm = LinearSSM(M=M, H=np.eye(3)[:2], Q=np.zeros((3, 3)), R=np.zeros((2, 2)) + 1e-300 * np.eye(2),
                    mu=np.ones(3), Sigma=np.zeros((3, 3)))
    ssm.R = np.zeros((2, 2))
    tr = simulate_linear(ssm, 4, 2, rng)
    for t in range(4):
        np.testing.assert_allclose(tr.u[0, t], np.linalg.matrix_power(M, t + 1) @ np.ones(3), atol=1e-14)
    np.testing.assert_allclose(tr.y, tr.u[..., :2], atol=1e-14)


def test_linear_noise_moments():
    ssm = build_advdiff(AdvDiffSpec.case2(n=16))
    tr = simulate_linear(ssm, 51, 2000, np.random.default_rng(1))
    u_prev = np.concatenate([np.zeros((2000, 1, 16)), tr.u[:, :-1]], axis=1)[:, 1:]
    w = (tr.u[:, 1:] - u_prev @ ssm.M.T).reshape(-1, 16)
    v = (tr.y - tr.u @ ssm.H.T).reshape(-1, 8)
    assert len(w) >= 1e5
    Qhat, Rhat = np.cov(w.T), np.cov(v.T)
    assert np.abs(np.diag(Qhat) / np.diag(ssm.Q) - 1).max() < 0.1
    assert np.abs(np.diag(Rhat) / np.diag(ssm.R) - 1).max() < 0.1
    assert np.linalg.norm(Qhat - ssm.Q) / np.linalg.norm(ssm.Q) < 0.1


def test_simulation_seed_determinism():
    spec = AdvDiffSpec.case1()
    a = spec.simulate(20, 5, np.random.default_rng(3))
    b = spec.simulate(20, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.y, b.y)


# ---------------------------------------------------------------- stochastic volatility
def test_sv_iid_limit_moments():
    spec = SVSpec(gamma=(0.0, 0.0), sigma=(1.0, 1.0), beta=1.0)
    tr = spec.simulate(100, 1000, np.random.default_rng(0))
    assert abs(tr.u.var() - 1.0) < 0.02
    assert abs(np.corrcoef(tr.u[:, 1:, 0].ravel(), tr.u[:, :-1, 0].ravel())[0, 1]) < 0.02


def test_sv_defaults_and_edge_cases():
    spec = SVSpec()
    np.testing.assert_allclose(spec.tau2, 0.09 / (1 - 0.9409))
    assert np.all(SVSpec(beta=0.0).simulate(5, 3, np.random.default_rng(0)).y == 0)
    with pytest.raises(ConfigurationError):
        SVSpec(gamma=(1.0, 0.5))


def test_sv_stationary_variance():
    spec = SVSpec()
    tr = spec.simulate(200, 2000, np.random.default_rng(1))
    np.testing.assert_allclose(tr.u.var(axis=(0, 1)), spec.tau2, rtol=0.05)


def test_sv_densities_match_simulation_scales():
    spec = SVSpec()
    u_prev = np.zeros((1, 2))
    lp = spec.transition_logpdf(np.zeros((1, 2)), u_prev)[0]
    assert lp == pytest.approx(2 * (-math.log(0.3) - 0.5 * math.log(2 * math.pi)))
    ll = spec.likelihood_logpdf(np.zeros((1, 2)), np.zeros((1, 2)))[0]
    assert ll == pytest.approx(2 * (-0.5 * math.log(2 * math.pi * 0.835**2)))


# ---------------------------------------------------------------- Burgers
def test_burgers_energy_decay_without_noise():
    spec = BurgersSpec(nu=1.0, sigma=0.0)
    tr = simulate_burgers(spec, 60, 1, np.random.default_rng(0))
    energy = np.linalg.norm(tr.u[0], axis=1)
    energy = np.concatenate([[np.linalg.norm(spec.initial_state())], energy])
    assert np.all(np.diff(energy) <= 0)


def test_burgers_matches_fine_grid_reference():
    spec = BurgersSpec(nu=0.05, sigma=0.0)
    tr = simulate_burgers(spec, 10, 1, np.random.default_rng(0))
    ref = burgers_reference(spec.x, spec.nu, 10 * spec.dt_obs)
    assert np.max(np.abs(tr.u[0, -1] - ref)) < 0.01 * np.max(np.abs(ref))


def test_burgers_time_self_convergence():
    base = dict(nu=0.05, sigma=0.0)
    T = 20

    def final(sub):
        return simulate_burgers(BurgersSpec(substeps=sub, **base), T, 1, np.random.default_rng(0)).u[0, -1]

    ref = final(64)
    e = [np.max(np.abs(final(s) - ref)) for s in (1, 2, 4)]
    assert e[1] / e[0] <= 0.6 and e[2] / e[1] <= 0.6


def test_burgers_boundaries_and_observations():
    spec = BurgersSpec()
    tr = simulate_burgers(spec, 5, 3, np.random.default_rng(0))
    assert tr.u.shape == (3, 5, 50) and tr.y.shape == (3, 5, 25)
    full = BurgersSolver(spec).full_field(tr.u)
    assert np.all(full[..., 0] == 0) and np.all(full[..., -1] == 0)
    assert len(spec.x) == 50 and spec.x[0] > -1 and spec.x[-1] < 1


def test_burgers_blowup_guard():
    with pytest.raises(SimulationError, match="trajectory"):
        simulate_burgers(BurgersSpec(blowup=0.5), 5, 2, np.random.default_rng(0))


# ---------------------------------------------------------------- Lorenz-96
def test_lorenz_fixed_point():
    spec = LorenzSpec(K=6, F=0.0, sigma_u=0.0)
    u, _ = integrate_lorenz(np.zeros((1, 6)), None, spec, 1.0, spec.dt_int)
    assert np.all(u == 0)


def test_lorenz_matches_rk4_reference():
    spec = LorenzSpec(K=5, F=8.0, sigma_u=0.0)
    u0, _ = spec.initial_state(1, None)
    u, _ = integrate_lorenz(u0, None, spec, spec.dt_obs, spec.dt_int)
    ref = rk4_lorenz(u0[0], 8.0, spec.dt_obs, spec.dt_int / 10)
    assert np.max(np.abs(u[0] - ref)) < 1e-3


@pytest.mark.parametrize("scheme", ["em", "heun"])
def test_lorenz_self_convergence(scheme):
    spec = LorenzSpec(K=8, F=8.0, sigma_u=0.0, scheme=scheme)
    u0 = spec.F + np.random.default_rng(0).normal(size=(1, 8))
    ref, _ = integrate_lorenz(u0, None, spec, 0.5, 1e-4)
    e = [np.max(np.abs(integrate_lorenz(u0, None, spec, 0.5, dt)[0] - ref)) for dt in (0.005, 0.0025, 0.00125)]
    assert e[1] / e[0] <= 0.6 and e[2] / e[1] <= 0.6


def test_lorenz_two_scale_self_convergence():
    spec = LorenzSpec.two_scale_default(K=4, J=8, sigma_u=0.0, sigma_v=0.0)
    rng = np.random.default_rng(1)
    u0, v0 = spec.F + rng.normal(size=(1, 4)), 0.1 * rng.normal(size=(1, 32))
    ref = integrate_lorenz(u0, v0, spec, 0.1, 1e-5)[0]
    e = [np.max(np.abs(integrate_lorenz(u0, v0, spec, 0.1, dt)[0] - ref)) for dt in (0.001, 0.0005, 0.00025)]
    assert e[1] / e[0] <= 0.6 and e[2] / e[1] <= 0.6


def test_lorenz_rotation_equivariance():
    spec = LorenzSpec(K=7, F=8.0, sigma_u=0.0)
    u0 = np.random.default_rng(2).normal(size=(1, 7)) + 8
    a, _ = integrate_lorenz(u0, None, spec, 0.5, spec.dt_int)
    b, _ = integrate_lorenz(np.roll(u0, 3, axis=1), None, spec, 0.5, spec.dt_int)
    np.testing.assert_allclose(np.roll(a, 3, axis=1), b, atol=1e-12)


def test_lorenz_observation_layout():
    single = simulate_lorenz(LorenzSpec(K=10), 5, 2, np.random.default_rng(0))
    assert single.y.shape == (2, 5, 10)
    two = simulate_lorenz(LorenzSpec.two_scale_default(K=8, J=4), 3, 2, np.random.default_rng(0))
    assert two.u.shape == (2, 3, 8) and two.y.shape == (2, 3, 4)


def test_lorenz_cubic_observation_noise():
    spec = LorenzSpec(K=4)
    tr = simulate_lorenz(spec, 200, 50, np.random.default_rng(3))
    resid = tr.y - tr.u**3
    assert abs(resid.var() - 1.0) < 0.05


def test_lorenz_blowup_guard():
    with pytest.raises(SimulationError):
        simulate_lorenz(LorenzSpec(K=5, blowup=1.0), 10, 2, np.random.default_rng(0))


# ---------------------------------------------------------------- datasets
def test_dataset_train_only_and_stats(tmp_path):
    ds = make_dataset(AdvDiffSpec.case1(), 30, 0, 15, seed=4)
    assert ds.test is None
    flat = ds.train.u.reshape(-1, 10).astype(np.float64)
    np.testing.assert_allclose(ds.u_stats.mean, flat.mean(0))
    np.testing.assert_allclose(ds.u_stats.std, flat.std(0))


def test_dataset_roundtrip_and_regeneration(tmp_path):
    ds = make_dataset(SVSpec(), 12, 4, 9, seed=5)
    save_dataset(tmp_path / "d.npz", ds)
    back = load_dataset(tmp_path / "d.npz")
    for a, b in [(ds.train.u, back.train.u), (ds.train.y, back.train.y), (ds.test.u, back.test.u),
                 (ds.u_stats.std, back.u_stats.std)]:
        np.testing.assert_array_equal(a, b)
    assert back.spec == ds.spec
    again = make_dataset(SVSpec(), 12, 4, 9, seed=5)
    np.testing.assert_array_equal(again.train.u, ds.train.u)


def test_spec_serialisation_roundtrip():
    for spec in [AdvDiffSpec.case2(n=32), SVSpec(), BurgersSpec(nu=0.01), LorenzSpec.two_scale_default(F=16.0)]:
        assert spec_from_dict(spec.to_dict()) == spec
