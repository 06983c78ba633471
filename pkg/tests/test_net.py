import numpy as np
import pytest

from comboseg import losses as L
from comboseg.net import (
    AdadeltaState,
    NetError,
    Network,
    NetworkConfig,
    NonFiniteGradient,
    adadelta_step,
    batch_norm_backward,
    batch_norm_forward,
    conv3d_backward,
    conv3d_forward,
    glorot_bound,
    glorot_init,
    load_checkpoint,
    params_equal,
    save_checkpoint,
)
from comboseg.training import from_flat, parameter_gradcheck, tiny_gradcheck_setup, to_flat


def test_glorot_bound_formula():
    assert glorot_bound(27, 27) == pytest.approx(np.sqrt(6 / 54))
    assert glorot_bound(27, 27) == pytest.approx(0.3333, abs=1e-4)


def test_glorot_deterministic():
    cfg = NetworkConfig(1, 2, (4, 8), seed=11)
    a, b = glorot_init(cfg), glorot_init(cfg)
    assert list(a) == list(b)
    for k in a:
        assert np.array_equal(a[k], b[k])
    assert all(not a[k].any() for k in a if k.endswith(".b"))


def test_glorot_variance():
    # 10^4+ samples from one kernel: fan_in = 27*16, fan_out = 27*32
    cfg = NetworkConfig(16, 32, (32,), seed=3)
    w = glorot_init(cfg)["enc0.W"]
    assert w.size >= 10_000
    expected = 2.0 / (27 * 16 + 27 * 32)
    assert abs(w.var() - expected) / expected < 0.05
    bound = glorot_bound(27 * 16, 27 * 32)
    assert np.abs(w).max() <= bound


def conv_reference(x, w, b):
    """Direct 7-loop 'same' convolution."""
    bsz, X, Y, Z, cin = x.shape
    cout = w.shape[-1]
    out = np.zeros((bsz, X, Y, Z, cout))
    for n in range(bsz):
        for i in range(X):
            for j in range(Y):
                for k in range(Z):
                    acc = b.copy()
                    for di in range(3):
                        for dj in range(3):
                            for dk in range(3):
                                a, bb, c = i + di - 1, j + dj - 1, k + dk - 1
                                if 0 <= a < X and 0 <= bb < Y and 0 <= c < Z:
                                    acc += x[n, a, bb, c] @ w[di, dj, dk]
                    out[n, i, j, k] = acc
    return out


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 2, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(conv3d_forward(x, w, b), conv_reference(x, w, b), atol=1e-12)


def test_conv_backward_fd():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 3, 2, 2))
    w = rng.normal(size=(3, 3, 3, 2, 2))
    b = rng.normal(size=2)
    g = rng.normal(size=(1, 3, 3, 2, 2))
    dx, dw, db = conv3d_backward(x, w, g)
    f = lambda xx, ww, bbb: float(np.sum(conv3d_forward(xx, ww, bbb) * g))
    h = 1e-6
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        flat = arr.reshape(-1)
        for i in range(0, flat.size, 7):
            o = flat[i]
            flat[i] = o + h
            up = f(x, w, b)
            flat[i] = o - h
            dn = f(x, w, b)
            flat[i] = o
            assert grad.reshape(-1)[i] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-8)


def test_zero_head_outputs_half():
    net = Network(NetworkConfig(1, 3, (2, 4), seed=0))
    net.params["head.W"][:] = 0
    p = net.predict(np.random.default_rng(0).random((8, 8, 8)))
    assert p.shape == (1, 8, 8, 8, 3)
    assert np.all(p == 0.5)


def test_output_shape_and_range():
    net = Network(NetworkConfig(1, 2, (2, 4, 4), seed=1))
    p, cache = net.forward(np.random.default_rng(1).random((2, 8, 4, 12, 1)), "train")
    assert p.shape == (2, 8, 4, 12, 2)
    assert np.all((p > 0) & (p < 1))
    assert cache is not None


def test_eval_has_no_cache_and_is_deterministic():
    net = Network(NetworkConfig(1, 1, (2, 4), seed=2))
    x = np.random.default_rng(2).random((4, 4, 4))
    net.forward(x, "train")
    a, cache = net.forward(x, "eval")
    b, _ = net.forward(x, "eval")
    assert cache is None
    assert np.array_equal(a, b)


def test_dimension_errors():
    net = Network(NetworkConfig(1, 1, (2, 4, 8)))
    with pytest.raises(NetError):
        net.predict(np.zeros((6, 8, 8)))
    with pytest.raises(NetError):
        net.predict(np.zeros((1, 8, 8, 8, 2)))


def test_backward_cache_errors():
    net = Network(NetworkConfig(1, 1, (2,)))
    with pytest.raises(NetError):
        net.backward(None, np.zeros((1, 2, 2, 2, 1)))
    p, cache = net.forward(np.zeros((2, 2, 2)), "train")
    net.apply_gradients(AdadeltaState(), {k: np.ones_like(v) for k, v in net.params.items()})
    with pytest.raises(NetError):
        net.backward(cache, np.zeros_like(p))


def test_zero_upstream_gradient():
    net = Network(NetworkConfig(1, 2, (2, 4), seed=5))
    p, cache = net.forward(np.random.default_rng(5).random((4, 4, 4)), "train")
    grads = net.backward(cache, np.zeros_like(p))
    assert set(grads) == set(net.params)
    assert all(not g.any() for g in grads.values())
    assert all(grads[k].shape == net.params[k].shape for k in grads)


def test_final_bias_gradient_by_hand():
    # one voxel: d loss / d head.b = sum over the voxel of upstream * sigmoid'
    net = Network(NetworkConfig(1, 2, (2,), seed=6))
    p, cache = net.forward(np.array([[[0.7]]]), "train")
    up = np.array([0.3, -1.2]).reshape(1, 1, 1, 1, 2)
    grads = net.backward(cache, up)
    expected = (up * p * (1 - p)).reshape(2)
    np.testing.assert_allclose(grads["head.b"], expected, rtol=1e-14)


def test_tiny_net_parameter_gradcheck():
    net, x, t = tiny_gradcheck_setup(seed=0, size=4, widths=(2,))
    fn = lambda p, tt: L.combo_loss(p, tt, L.ComboParams(0.5, 0.5), clamp=False)
    errs = parameter_gradcheck(net, x, t, fn)
    assert max(errs.values()) < 1e-3


def test_deeper_net_parameter_gradcheck():
    net, x, t = tiny_gradcheck_setup(seed=4, size=4, widths=(2, 3), channels=2)
    fn = lambda p, tt: L.cross_entropy_mean(p, tt, clamp=False)
    assert max(parameter_gradcheck(net, x, t, fn).values()) < 1e-3


def test_batch_norm_train_constant_channel():
    x = np.full((1, 2, 2, 2, 2), 3.0)
    y, _ = batch_norm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)
    assert np.allclose(y, 0)


def test_batch_norm_eval_identity():
    x = np.random.default_rng(0).normal(size=(1, 3, 3, 3, 2))
    y, _ = batch_norm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), False)
    np.testing.assert_allclose(y, x, rtol=1e-4)


def test_batch_norm_running_update():
    x = np.random.default_rng(1).normal(2.0, 3.0, size=(2, 3, 3, 3, 1))
    rm, rv = np.zeros(1), np.ones(1)
    batch_norm_forward(x, np.ones(1), np.zeros(1), rm, rv, True)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var())


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_backward_fd(train):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 2, 2, 2))
    gamma, beta = rng.uniform(0.5, 1.5, 2), rng.normal(size=2)
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, 2)
    g = rng.normal(size=x.shape)

    def f(xx, gg, bb):
        y, _ = batch_norm_forward(xx, gg, bb, rm.copy(), rv.copy(), train)
        return float(np.sum(y * g))

    _, cache = batch_norm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)
    dx, dgamma, dbeta = batch_norm_backward(g, cache)
    h = 1e-6
    for arr, grad in ((x, dx), (gamma, dgamma), (beta, dbeta)):
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + h
            up = f(x, gamma, beta)
            flat[i] = o - h
            dn = f(x, gamma, beta)
            flat[i] = o
            num[i] = (up - dn) / (2 * h)
        assert L.max_relative_error(grad.reshape(-1), num, 1e-6) < 1e-3


def test_adadelta_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    st = AdadeltaState()
    st.eg2["w"] = np.array([4.0, 1.0])
    adadelta_step(st, params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_allclose(st.eg2["w"], [0.95 * 4.0, 0.95])


def test_adadelta_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    params = {"w": np.zeros(3)}
    st = AdadeltaState(rho=0.95, eps=1e-8, lr=1.0)
    adadelta_step(st, params, {"w": g})
    expected = -np.sqrt(1e-8) / np.sqrt(0.05 * g * g + 1e-8) * g
    np.testing.assert_allclose(params["w"], expected, rtol=1e-14)


def test_adadelta_constant_gradient_fixed_point():
    # scalar simulation oracle: iterate the recurrences by hand
    rho, eps, g = 0.95, 1e-8, 0.3
    eg2 = edx2 = 0.0
    for _ in range(400):
        eg2 = rho * eg2 + (1 - rho) * g * g
        dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 = rho * edx2 + (1 - rho) * dx * dx
    params = {"w": np.zeros(1)}
    st = AdadeltaState(rho, eps)
    for _ in range(400):
        before = params["w"].copy()
        adadelta_step(st, params, {"w": np.array([g])})
    step = abs(params["w"][0] - before[0])
    assert step == pytest.approx(abs(dx), rel=1e-12)
    # after 400 steps the accumulator has converged to g^2
    assert st.eg2["w"][0] == pytest.approx(g * g, rel=1e-6)
    ratio = np.sqrt(st.edx2["w"][0] + eps) / np.sqrt(st.eg2["w"][0] + eps) * g
    assert step == pytest.approx(ratio, rel=0.05)


def test_adadelta_rejects_nonfinite():
    params = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradient):
        adadelta_step(AdadeltaState(), params, {"w": np.array([1.0, np.nan])})
    np.testing.assert_array_equal(params["w"], [1, 1])


def test_checkpoint_round_trip(tmp_path):
    net = Network(NetworkConfig(1, 2, (2, 4), True, 9))
    net.forward(np.random.default_rng(0).random((4, 4, 4)), "train")
    save_checkpoint(tmp_path / "m.cnet", net)
    raw = (tmp_path / "m.cnet").read_bytes()
    assert raw[:4] == b"CNET"
    back = load_checkpoint(tmp_path / "m.cnet")
    assert back.cfg == net.cfg
    assert params_equal(back, net)


def test_flat_round_trip_matches_mask_order():
    from comboseg.volume import flatten
    rng = np.random.default_rng(0)
    a = rng.random((1, 3, 4, 2, 2))
    np.testing.assert_array_equal(to_flat(a), flatten(a[0]))
    np.testing.assert_array_equal(from_flat(to_flat(a), a.shape), a)
