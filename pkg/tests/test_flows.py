import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluid import grad as G
from fluid.flows import (
    FlowConfig, coupling_forward, coupling_inverse, coupling_scale, flow_forward, flow_inverse, init_flow,
    log_prob, rff_coupling_net, sample, scale_bias_forward, scale_bias_inverse,
)
from fluid.grad import Tensor

from oracles import fd_grad, randomize_params, rel_err


def make(d, dc=0, seed=0, dtype="float64", randomize=True, **kw):
    kw.setdefault("mlp_depth", 2)
    kw.setdefault("mlp_width", 16)
    kw.setdefault("rff_features", 8)
    kw.setdefault("sb_width", 8)
    kw.setdefault("num_coupling", 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = init_flow(FlowConfig(data_dim=d, cond_dim=dc, dtype=dtype, **kw), np.random.default_rng(seed))
    if randomize:
        randomize_params(m.params, np.random.default_rng(seed + 100))
    return m


def jacobian_fd(f, u, eps=1e-6):
    d = len(u)
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        J[:, j] = (f(u + e) - f(u - e)) / (2 * eps)
    return J


def test_scale_bias_identity_at_init():
    m = make(3, 2, randomize=False)
    u = np.random.default_rng(0).normal(size=(5, 3))
    ev = scale_bias_forward(u, np.ones((5, 2)), m)
    np.testing.assert_array_equal(ev.output.data, u)
    assert np.all(ev.log_det.data == 0)


def test_scale_bias_hand_example():
    m = make(2, 0, randomize=False)
    m.params["sb.b2"].data = np.array([math.log(2.0), 0.0, 1.0, -1.0])
    ev = scale_bias_forward(np.array([1.0, 1.0]), None, m)
    np.testing.assert_allclose(ev.output.data[0], [3.0, 0.0], atol=1e-15)
    assert ev.log_det.data[0] == pytest.approx(math.log(2.0), abs=1e-15)


def test_scale_bias_inverse_of_shift_is_zero_and_roundtrip():
    m = make(4, 3)
    rng = np.random.default_rng(1)
    c = rng.normal(size=(6, 3))
    from fluid.flows import scale_bias_params

    _, xi = scale_bias_params(Tensor(c), m, 6)
    np.testing.assert_allclose(scale_bias_inverse(xi.data, c, m).data, 0.0, atol=1e-12)
    v = rng.normal(size=(6, 4))
    np.testing.assert_allclose(scale_bias_forward(scale_bias_inverse(v, c, m).data, c, m).output.data, v, atol=1e-12)


def test_coupling_identity_when_outputs_zero():
    m = make(5, 2, randomize=False)
    u = np.random.default_rng(2).normal(size=(4, 5))
    ev = coupling_forward(u, np.zeros((4, 2)), m, 0)
    np.testing.assert_array_equal(ev.output.data, u)
    np.testing.assert_array_equal(coupling_inverse(u, np.zeros((4, 2)), m, 0).data, u)
    assert np.all(ev.log_det.data == 0)


def test_coupling_first_block_unchanged_and_roundtrip():
    m = make(5, 2)
    rng = np.random.default_rng(3)
    u, c = rng.normal(size=(7, 5)), rng.normal(size=(7, 2))
    v = coupling_forward(u, c, m, 1).output.data
    np.testing.assert_array_equal(v[:, :2], u[:, :2])
    np.testing.assert_allclose(coupling_inverse(v, c, m, 1).data, u, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_coupling_scale_bounded(seed, amp):
    m = make(4, 1, seed=seed)
    randomize_params(m.params, np.random.default_rng(seed), scale=amp)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 3)) * amp
    s, _ = rff_coupling_net(Tensor(x), m, 0)
    sc = coupling_scale(s, m.config.alpha).data
    assert np.all(sc >= 0.4) and np.all(sc <= 1.6)
    assert np.all(np.isfinite(sc))


def test_rff_output_shape():
    m = make(7, 3)
    s, t = rff_coupling_net(Tensor(np.zeros((2, 3 + 3))), m, 0)
    assert s.shape == (2, 4) and t.shape == (2, 4)


def test_zero_final_layer_gives_zero_conditioner_output():
    m = make(4, 2, randomize=False)
    s, t = rff_coupling_net(Tensor(np.random.default_rng(0).normal(size=(3, 4))), m, 2)
    assert np.all(s.data == 0) and np.all(t.data == 0)


@pytest.mark.parametrize("d", [2, 3, 4, 6])
def test_log_det_matches_finite_difference_jacobian(d):
    m = make(d, 2, seed=d)
    rng = np.random.default_rng(d)
    c = rng.normal(size=2)
    for _ in range(3):
        u = rng.normal(size=d)
        J = jacobian_fd(lambda x: flow_forward(x, c, m).output.data[0], u)
        ld = flow_forward(u, c, m).log_det.data[0]
        assert ld == pytest.approx(np.linalg.slogdet(J)[1], rel=1e-4, abs=1e-6)


def test_coupling_log_det_matches_jacobian_d4():
    m = make(4, 1)
    rng = np.random.default_rng(5)
    u, c = rng.normal(size=4), rng.normal(size=1)
    J = jacobian_fd(lambda x: coupling_forward(x, c, m, 0).output.data[0], u)
    assert coupling_forward(u, c, m, 0).log_det.data[0] == pytest.approx(np.linalg.slogdet(J)[1], rel=1e-4)


@pytest.mark.parametrize("d", [2, 4, 10, 50])
def test_roundtrip_float32(d):
    dc = 3
    m = make(d, dc, seed=d, dtype="float32", mlp_depth=3, mlp_width=32, num_coupling=6)
    randomize_params(m.params, np.random.default_rng(d), scale=0.1)
    rng = np.random.default_rng(d + 1)
    u = rng.normal(size=(1000, d)).astype(np.float32)
    c = rng.normal(size=(1000, dc)).astype(np.float32)
    z = flow_forward(u, c, m).output.data
    back = flow_inverse(z, c, m).data
    assert np.max(np.abs(back - u)) < 1e-5


def test_roundtrip_float64():
    m = make(6, 2)
    rng = np.random.default_rng(0)
    u, c = rng.normal(size=(50, 6)), rng.normal(size=(50, 2))
    back = flow_inverse(flow_forward(u, c, m).output, c, m).data
    assert np.max(np.abs(back - u)) < 1e-10


def test_log_det_is_sum_of_layer_log_dets():
    m = make(5, 2)
    rng = np.random.default_rng(1)
    ev, layers = flow_forward(rng.normal(size=(3, 5)), rng.normal(size=(3, 2)), m, return_layers=True)
    np.testing.assert_allclose(ev.log_det.data, sum(t.data for t in layers), rtol=1e-12)
    assert len(layers) == 1 + m.config.num_coupling


def test_zero_couplings_reduce_to_scale_bias():
    m = make(3, 2, num_coupling=0)
    rng = np.random.default_rng(2)
    u, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    a, b = flow_forward(u, c, m), scale_bias_forward(u, c, m)
    np.testing.assert_array_equal(a.output.data, b.output.data)


def test_log_prob_identity_at_origin():
    m = make(2, 0, randomize=False)
    assert log_prob(np.zeros(2), None, m).data[0] == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


def test_identity_flow_samples_are_standard_normal():
    m = make(3, 1, randomize=False, dtype="float32")
    x = sample(np.zeros(1), m, np.random.default_rng(0), n=10_000)
    assert np.all(np.abs(x.mean(0)) < 0.05)
    assert np.all((x.var(0) > 0.9) & (x.var(0) < 1.1))


def test_sample_deterministic_and_log_prob_finite():
    m = make(4, 2, dtype="float32")
    c = np.random.default_rng(0).normal(size=(1, 2))
    a = sample(c, m, np.random.default_rng(7), n=10_000)
    b = sample(c, m, np.random.default_rng(7), n=10_000)
    np.testing.assert_array_equal(a, b)
    lp = log_prob(a, np.broadcast_to(c, (10_000, 2)), m).data
    assert np.all(np.isfinite(lp))


def test_conditioning_changes_density():
    m = make(3, 2)
    u = np.ones(3)
    a = log_prob(u, np.array([0.0, 0.0]), m).data[0]
    b = log_prob(u, np.array([1.0, -1.0]), m).data[0]
    assert abs(a - b) > 0


def test_shape_errors():
    m = make(3, 2)
    with pytest.raises(ValueError):
        flow_forward(np.zeros((2, 4)), np.zeros((2, 2)), m)
    with pytest.raises(ValueError):
        flow_forward(np.zeros((2, 3)), np.zeros((2, 5)), m)
    with pytest.raises(ValueError):
        flow_forward(np.zeros((2, 3)), None, m)


def test_one_dimensional_flow_warns_and_works():
    with pytest.warns(UserWarning):
        m = init_flow(FlowConfig(data_dim=1, cond_dim=2), np.random.default_rng(0))
    assert m.config.n_coupling_effective == 0
    assert np.isfinite(log_prob(np.zeros((1, 1)), np.zeros((1, 2)), m).data).all()


def _train_2d(m, steps=300):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 2))
    x[:, 1] = 0.5 * x[:, 1] + 0.4 * x[:, 0] ** 2 - 0.4  # banana-shaped target
    for _ in range(steps):
        idx = rng.integers(0, len(x), 128)
        loss = -G.tmean(log_prob(x[idx], None, m))
        G.backprop(loss, m.params)
        G.adam_step(m.params, 5e-3)
    return float(loss.data)


def test_trained_density_integrates_to_one():
    m = make(2, 0, randomize=False, num_coupling=4, mlp_depth=2, mlp_width=32)
    _train_2d(m)
    g = np.linspace(-6, 6, 241)
    X, Y = np.meshgrid(g, g, indexing="ij")
    with G.no_grad():
        p = np.exp(log_prob(np.stack([X.ravel(), Y.ravel()], 1), None, m).data).reshape(X.shape)
    total = np.trapezoid(np.trapezoid(p, g, axis=1), g)
    assert total == pytest.approx(1.0, abs=0.02)


# ---- gradient checks in float64 ----------------------------------------------------------
def _check_param_grads(m, loss_fn, tol=1e-4, max_entries=40):
    loss = loss_fn()
    names = m.params.trainable()
    grads = G.grad_of(loss, [m.params[n] for n in names])
    rng = np.random.default_rng(0)
    for n, g in zip(names, grads):
        arr = m.params[n].data
        pick = rng.choice(arr.size, size=min(max_entries, arr.size), replace=False)
        for i in pick:
            ix = np.unravel_index(i, arr.shape)
            old = arr[ix]
            arr[ix] = old + 1e-5
            fp = float(loss_fn().data)
            arr[ix] = old - 1e-5
            fm = float(loss_fn().data)
            arr[ix] = old
            num = (fp - fm) / 2e-5
            assert abs(g[ix] - num) <= tol * max(1.0, abs(num)), (n, i)


def test_scale_bias_log_det_gradient():
    m = make(3, 2, num_coupling=0)
    c = np.random.default_rng(0).normal(size=(4, 2))
    _check_param_grads(m, lambda: G.tsum(scale_bias_forward(np.ones((4, 3)), c, m).log_det))


def test_coupling_and_rff_gradients():
    m = make(4, 2, num_coupling=1)
    rng = np.random.default_rng(1)
    u, c, w = rng.normal(size=(5, 4)), rng.normal(size=(5, 2)), rng.normal(size=(5, 4))

    def loss():
        ev = coupling_forward(u, c, m, 0)
        return G.tsum(ev.output * w) + G.tsum(ev.log_det)

    _check_param_grads(m, loss)


def test_log_prob_gradient_wrt_inputs():
    m = make(4, 3)
    rng = np.random.default_rng(2)
    u, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    tu, tc = Tensor(u.copy(), requires_grad=True), Tensor(c.copy(), requires_grad=True)
    gu, gc = G.grad_of(G.tsum(log_prob(tu, tc, m)), [tu, tc])
    f = lambda: float(np.sum(log_prob(u, c, m).data))  # noqa: E731
    assert rel_err(gu, fd_grad(f, u)) < 1e-4
    assert rel_err(gc, fd_grad(f, c)) < 1e-4
