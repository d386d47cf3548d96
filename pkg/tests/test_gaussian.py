import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluid.gaussian import (
    GaussianBelief, LinearSSM, SingularMatrixError, kalman_filter, kalman_predict, kalman_update, kl_gaussian,
    kl_gaussian_vs_flow, one_step_gain, one_step_posterior, predictive_density, rts_backward_kernel,
    rts_kernel_sampler, rts_smoother,
)
from fluid.inference import backward_paths

from oracles import joint_gaussian_posteriors


def random_ssm(rng, n, ny):
    A = rng.normal(size=(n, n))
    M = A / (1.2 * max(1.0, np.abs(np.linalg.eigvals(A)).max()))
    B = rng.normal(size=(n, n))
    C = rng.normal(size=(ny, ny))
    S = rng.normal(size=(n, n))
    return LinearSSM(M=M, H=rng.normal(size=(ny, n)), Q=B @ B.T / n + 0.1 * np.eye(n),
                     R=C @ C.T / ny + 0.2 * np.eye(ny), mu=rng.normal(size=n), Sigma=S @ S.T / n + 0.1 * np.eye(n))


def scalar(Q=1.0, R=1.0, M=1.0, H=1.0):
    return LinearSSM(M=[[M]], H=[[H]], Q=[[Q]], R=[[R]], mu=[0.0], Sigma=[[1.0]])


def test_scalar_update_hand_example():
    ssm = scalar(Q=0.0)
    post = kalman_update(GaussianBelief([0.0], [[1.0]]), [2.0], ssm)
    assert post.mean[0] == pytest.approx(1.0, abs=1e-12)
    assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_uninformative_observation_leaves_prior():
    rng = np.random.default_rng(0)
    ssm = random_ssm(rng, 3, 2)
    ssm.R = 1e8 * np.eye(2)
    prior = GaussianBelief(rng.normal(size=3), np.eye(3))
    post = kalman_update(prior, rng.normal(size=2) * 10, ssm)
    assert np.linalg.norm(post.mean - prior.mean) < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5))
def test_filter_equals_joint_conditioning(seed, n, ny, T):
    rng = np.random.default_rng(seed)
    ssm = random_ssm(rng, n, ny)
    ys = rng.normal(size=(T, ny))
    track = kalman_filter(ys, ssm)
    fm, fc, sm, sc = joint_gaussian_posteriors(ssm, ys)
    np.testing.assert_allclose(track.means, fm, atol=1e-8)
    np.testing.assert_allclose(track.covs, fc, atol=1e-8)
    smooth = rts_smoother(track, ssm)
    np.testing.assert_allclose([b.mean for b in smooth], sm, atol=1e-8)
    np.testing.assert_allclose([b.cov for b in smooth], sc, atol=1e-8)


def test_covariances_stay_symmetric_psd():
    rng = np.random.default_rng(1)
    ssm = random_ssm(rng, 3, 1)
    track = kalman_filter(rng.normal(size=(30, 1)), ssm)
    for b in track.filtered + track.predicted:
        np.testing.assert_array_equal(b.cov, b.cov.T)
        assert np.linalg.eigvalsh(b.cov).min() >= -1e-10


def test_rts_kernel_degenerate_and_scalar():
    G, S, off = rts_backward_kernel(GaussianBelief([0.3], [[2.0]]), scalar(Q=0.0))
    assert G[0, 0] == pytest.approx(1.0, abs=1e-12) and S[0, 0] == pytest.approx(0.0, abs=1e-12)
    G, S, off = rts_backward_kernel(GaussianBelief([0.0], [[1.0]]), scalar(Q=1.0))
    assert G[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert S[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_rts_kernel_singular_prediction():
    ssm = LinearSSM(M=np.zeros((1, 1)), H=[[1.0]], Q=[[0.0]], R=[[1.0]], mu=[0.0], Sigma=[[1.0]])
    with pytest.raises(SingularMatrixError):
        rts_backward_kernel(GaussianBelief([0.0], [[1.0]]), ssm)


def test_kernel_sampling_reproduces_rts_marginals():
    rng = np.random.default_rng(2)
    ssm = random_ssm(rng, 2, 1)
    ys = rng.normal(size=(6, 1))
    track = kalman_filter(ys, ssm)
    smooth = rts_smoother(track, ssm)
    N = 10_000
    terminal = track.filtered[-1].sample(N, rng)
    paths = backward_paths(terminal, rts_kernel_sampler(track, ssm), len(ys), rng)
    for k, b in enumerate(smooth):
        se = np.sqrt(np.diag(b.cov) / N)
        assert np.all(np.abs(paths[:, k].mean(0) - b.mean) < 3.5 * se + 1e-12)
        # variance estimator standard error ~ var * sqrt(2/N)
        v = paths[:, k].var(0)
        assert np.all(np.abs(v - np.diag(b.cov)) < 3.5 * np.diag(b.cov) * math.sqrt(2 / N))


def test_one_step_posterior_cases():
    ssm = scalar(Q=0.0, M=2.0)
    post = one_step_posterior([1.5], [0.0], ssm)
    assert post.mean[0] == 3.0 and post.cov[0, 0] == 0.0
    assert one_step_gain(scalar())[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_one_step_posterior_matches_update_from_point_mass():
    rng = np.random.default_rng(3)
    ssm = random_ssm(rng, 3, 2)
    u_prev, y = rng.normal(size=3), rng.normal(size=2)
    direct = one_step_posterior(u_prev, y, ssm)
    via = kalman_update(kalman_predict(GaussianBelief(u_prev, np.zeros((3, 3))), ssm), y, ssm)
    np.testing.assert_allclose(direct.mean, via.mean, atol=1e-12)
    np.testing.assert_allclose(direct.cov, via.cov, atol=1e-12)


def test_predictive_density_at_mean_and_scalar():
    rng = np.random.default_rng(4)
    ssm = random_ssm(rng, 3, 2)
    u = rng.normal(size=3)
    S = ssm.H @ ssm.Q @ ssm.H.T + ssm.R
    val = predictive_density(u, ssm.H @ ssm.M @ u, ssm)
    assert val == pytest.approx(-0.5 * np.linalg.slogdet(2 * np.pi * S)[1], abs=1e-12)
    s = scalar(Q=1.0, R=1.0, M=0.5)
    # y ~ N(0.5 * 2, 2) evaluated at y = 2
    assert predictive_density([2.0], [2.0], s) == pytest.approx(-0.5 * math.log(2 * math.pi * 2) - 0.25, abs=1e-12)


def test_predictive_density_monte_carlo_histogram():
    s = scalar(Q=0.5, R=0.3, M=0.8)
    rng = np.random.default_rng(5)
    u = 1.2
    y = 0.8 * u + rng.normal(size=400_000) * math.sqrt(0.5) + rng.normal(size=400_000) * math.sqrt(0.3)
    edges = np.linspace(-0.5, 2.5, 13)
    counts, _ = np.histogram(y, bins=edges)
    hist = counts / (len(y) * np.diff(edges))
    mids = 0.5 * (edges[1:] + edges[:-1])
    dens = np.exp(predictive_density(np.full((len(mids), 1), u), mids[:, None], s))
    # bin-averaged density is within a few percent of the midpoint density for these narrow bins
    assert np.all(np.abs(hist - dens) / dens < 0.05)


def test_kl_closed_form_properties():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(3, 3))
    p = GaussianBelief(rng.normal(size=3), A @ A.T + np.eye(3))
    assert kl_gaussian(p, p) == pytest.approx(0.0, abs=1e-12)
    q = GaussianBelief(p.mean + 0.1, p.cov * 1.3)
    assert kl_gaussian(p, q) > 0
    # scalar closed form
    a, b = GaussianBelief([0.0], [[1.0]]), GaussianBelief([1.0], [[2.0]])
    expect = 0.5 * (1 / 2 + 1 / 2 - 1 + math.log(2))
    assert kl_gaussian(a, b) == pytest.approx(expect, abs=1e-12)


def test_monte_carlo_kl_estimate_and_stderr():
    rng = np.random.default_rng(7)
    p = GaussianBelief([0.0, 0.0], np.eye(2))
    q = GaussianBelief([0.3, -0.2], np.diag([1.5, 0.8]))
    est, se = kl_gaussian_vs_flow(p, q.logpdf, 20_000, rng)
    assert se > 0
    assert abs(est - kl_gaussian(p, q)) < 4 * se
    est0, se0 = kl_gaussian_vs_flow(p, p.logpdf, 100, rng)
    assert est0 == 0.0 and se0 == 0.0


def test_monte_carlo_kl_rejects_nonfinite():
    p = GaussianBelief([0.0], [[1.0]])
    with pytest.raises(FloatingPointError):
        kl_gaussian_vs_flow(p, lambda x: np.full(len(x), np.nan), 10, np.random.default_rng(0))


def test_ssm_validation():
    with pytest.raises(ValueError):
        LinearSSM(M=np.eye(2), H=np.eye(2), Q=-np.eye(2), R=np.eye(2), mu=np.zeros(2), Sigma=np.eye(2))
    with pytest.raises(ValueError):
        LinearSSM(M=np.eye(2), H=np.eye(2), Q=np.eye(2), R=np.zeros((2, 2)), mu=np.zeros(2), Sigma=np.eye(2))
    with pytest.raises(ValueError):
        LinearSSM(M=np.eye(2), H=np.eye(3), Q=np.eye(2), R=np.eye(2), mu=np.zeros(2), Sigma=np.eye(2))
