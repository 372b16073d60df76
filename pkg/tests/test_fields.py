"""Finite-difference oracles for the sine-MLP core.

Every derivative the training losses rely on is checked here against central
differences on small nets: spatial gradient/Hessian of the forward pass and
parameter gradients through value, gradient and Hessian cotangents.
"""

import numpy as np
import pytest

from fieldprint import fields
from fieldprint.fields import (
    AdamState,
    FieldParams,
    adam_step,
    backward_params,
    eval_field,
    forward,
    load_checkpoint,
    save_checkpoint,
    siren_init,
)


def small_net(seed=0, sizes=(3, 8, 8, 1), omega0=7.0):
    return siren_init(sizes, omega0=omega0, rng=seed)


def fd_spatial_grad(params, x, h=1e-5):
    g = np.zeros((params.out_dim, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        vp, _, _ = forward(params, (x + e)[None])
        vm, _, _ = forward(params, (x - e)[None])
        g[:, d] = (vp[0] - vm[0]) / (2 * h)
    return g


def fd_spatial_hess(params, x, h=1e-5):
    hs = np.zeros((params.out_dim, 3, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        _, gp, _ = forward(params, (x + e)[None], order=1)
        _, gm, _ = forward(params, (x - e)[None], order=1)
        hs[:, d, :] = (gp[0] - gm[0]) / (2 * h)
    return 0.5 * (hs + np.swapaxes(hs, 1, 2))


def fd_param_grad(loss_fn, params, h=1e-6):
    """Brute-force central-difference gradient over every scalar parameter."""
    vec = params.ravel()
    g = np.zeros_like(vec)
    for i in range(vec.size):
        vp = vec.copy()
        vp[i] += h
        vm = vec.copy()
        vm[i] -= h
        g[i] = (loss_fn(params.with_ravel(vp)) - loss_fn(params.with_ravel(vm))) / (2 * h)
    return g


def pack_grads(params, gw, gb):
    parts = []
    for w, b in zip(gw, gb):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


class TestForward:
    def test_constant_field(self):
        # Zero weights: output is the final bias, derivatives vanish.
        net = small_net()
        for w in net.weights:
            w[:] = 0.0
        net.biases[-1][:] = 2.5
        ev = eval_field(net, np.array([0.1, -0.2, 0.3]), order=2)
        assert ev.value[0] == pytest.approx(2.5)
        assert np.allclose(ev.grad, 0)
        assert np.allclose(ev.hessian, 0)

    def test_single_linear_layer(self):
        w = np.array([[1.0, -2.0, 0.5]])
        net = FieldParams([w], [np.array([0.25])])
        ev = eval_field(net, np.array([0.3, 0.1, -0.4]), order=2)
        assert ev.value[0] == pytest.approx(w[0] @ [0.3, 0.1, -0.4] + 0.25)
        assert np.allclose(ev.grad[0], w[0])
        assert np.allclose(ev.hessian, 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_vs_fd(self, seed):
        net = small_net(seed)
        rng = np.random.default_rng(seed + 10)
        for x in rng.uniform(-1, 1, size=(10, 3)):
            _, g, _ = forward(net, x[None], order=1)
            ref = fd_spatial_grad(net, x)
            assert np.abs(g[0] - ref).max() < 1e-6 * max(1.0, np.abs(ref).max())

    @pytest.mark.parametrize("seed", [0, 3])
    def test_hessian_vs_fd_and_symmetry(self, seed):
        net = small_net(seed, sizes=(3, 8, 8, 2))
        rng = np.random.default_rng(seed)
        for x in rng.uniform(-1, 1, size=(5, 3)):
            _, _, h = forward(net, x[None], order=2)
            assert np.abs(h[0] - np.swapaxes(h[0], 1, 2)).max() < 1e-10
            ref = fd_spatial_hess(net, x)
            assert np.abs(h[0] - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())

    def test_shape_mismatch_raises(self):
        net = small_net()
        with pytest.raises(fields.FieldShapeError):
            forward(net, np.zeros((4, 2)))

    def test_nonfinite_params_rejected(self):
        net = small_net()
        net.weights[0][0, 0] = np.nan
        with pytest.raises(fields.NumericError):
            net.validate()


class TestBackward:
    def test_value_squared_loss(self):
        # loss = sum value(x)^2 over a small batch
        net = small_net(4, sizes=(3, 8, 1))
        x = np.random.default_rng(0).uniform(-1, 1, size=(3, 3))

        def loss(p):
            v, _, _ = forward(p, x)
            return float((v ** 2).sum())

        v, _, _ = forward(net, x)
        gw, gb = backward_params(net, x, cot_value=2 * v)
        got = pack_grads(net, gw, gb)
        ref = fd_param_grad(loss, net)
        assert np.abs(got - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())

    def test_dirichlet_loss(self):
        # loss = sum ||grad(x)||^2 (the interior smoothness integrand)
        net = small_net(5, sizes=(3, 8, 8, 1))
        x = np.random.default_rng(1).uniform(-1, 1, size=(4, 3))

        def loss(p):
            _, g, _ = forward(p, x, order=1)
            return float((g ** 2).sum())

        _, g, _ = forward(net, x, order=1)
        gw, gb = backward_params(net, x, cot_grad=2 * g)
        got = pack_grads(net, gw, gb)
        ref = fd_param_grad(loss, net)
        assert np.abs(got - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())

    def test_laplacian_loss(self):
        # loss = sum (trace hessian)^2 — exercises third-order mixed terms
        net = small_net(6, sizes=(3, 6, 6, 1))
        x = np.random.default_rng(2).uniform(-1, 1, size=(3, 3))

        def loss(p):
            _, _, h = forward(p, x, order=2)
            lap = np.trace(h, axis1=2, axis2=3)
            return float((lap ** 2).sum())

        _, _, h = forward(net, x, order=2)
        lap = np.trace(h, axis1=2, axis2=3)
        cot_h = 2 * lap[:, :, None, None] * np.eye(3)
        gw, gb = backward_params(net, x, cot_hess=cot_h)
        got = pack_grads(net, gw, gb)
        ref = fd_param_grad(loss, net)
        assert np.abs(got - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())

    def test_asymmetric_hessian_cotangent(self):
        # Arbitrary (non-symmetric) hessian cotangents must still be exact.
        net = small_net(7, sizes=(3, 6, 1))
        x = np.random.default_rng(3).uniform(-1, 1, size=(2, 3))
        rng = np.random.default_rng(4)
        ch = rng.normal(size=(2, 1, 3, 3))
        cg = rng.normal(size=(2, 1, 3))
        cv = rng.normal(size=(2, 1))

        def loss(p):
            v, g, h = forward(p, x, order=2)
            return float((cv * v).sum() + (cg * g).sum() + (ch * h).sum())

        gw, gb = backward_params(net, x, cot_value=cv, cot_grad=cg, cot_hess=ch)
        got = pack_grads(net, gw, gb)
        ref = fd_param_grad(loss, net)
        assert np.abs(got - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())

    def test_zero_cotangents(self):
        net = small_net(8)
        x = np.zeros((2, 3))
        v, _, _ = forward(net, x)
        gw, gb = backward_params(net, x, cot_value=np.zeros_like(v))
        assert all(np.all(g == 0) for g in gw + gb)

    def test_cotangent_order_mismatch(self):
        net = small_net(9)
        x = np.zeros((2, 3))
        _, _, _, cache = forward(net, x, order=0, want_cache=True)
        with pytest.raises(fields.FieldShapeError):
            fields.backward(net, cache, None, cot_grad=np.zeros((2, 1, 3)))


class TestAdam:
    def test_quadratic_bowl(self):
        # f(p) = ||p||^2 on all parameters converges to ~0.
        net = small_net(10, sizes=(3, 6, 1))
        st = AdamState.for_params(net, lr=1e-2)
        for _ in range(200):
            gw = [2 * w for w in net.weights]
            gb = [2 * b for b in net.biases]
            adam_step(net, (gw, gb), st)
        assert np.linalg.norm(net.ravel()) < 1e-3

    def test_zero_gradient_keeps_params(self):
        net = small_net(11)
        before = net.ravel()
        st = AdamState.for_params(net)
        gw = [np.zeros_like(w) for w in net.weights]
        gb = [np.zeros_like(b) for b in net.biases]
        adam_step(net, (gw, gb), st)
        assert np.array_equal(net.ravel(), before)
        assert st.step == 1

    def test_determinism(self):
        runs = []
        for _ in range(2):
            net = small_net(12)
            st = AdamState.for_params(net, lr=1e-3)
            rng = np.random.default_rng(99)
            for _ in range(20):
                x = rng.uniform(-1, 1, size=(16, 3))
                v, _, _ = forward(net, x)
                gw, gb = backward_params(net, x, cot_value=2 * v)
                adam_step(net, (gw, gb), st)
            runs.append(net.ravel())
        assert np.array_equal(runs[0], runs[1])

    def test_nan_gradient_aborts(self):
        net = small_net(13)
        st = AdamState.for_params(net)
        gw = [np.zeros_like(w) for w in net.weights]
        gb = [np.zeros_like(b) for b in net.biases]
        gw[0][0, 0] = np.nan
        with pytest.raises(fields.NumericError, match="surface-distance"):
            adam_step(net, (gw, gb), st, context="surface-distance")


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = small_net(14, sizes=(3, 16, 16, 4))
        st = AdamState.for_params(net, lr=5e-4)
        st.step = 7
        st.m_w[0][:] = 0.125
        path = tmp_path / "field.ckpt.npz"
        save_checkpoint(path, net, st, config_digest="abc123", extra={"range": [0.0, 1.0]})
        p2, s2, meta = load_checkpoint(path)
        assert meta["config_digest"] == "abc123"
        assert np.array_equal(p2.ravel(), net.ravel())
        assert s2.step == 7 and s2.lr == 5e-4
        assert np.array_equal(s2.m_w[0], st.m_w[0])
        assert np.allclose(meta["range"], [0.0, 1.0])
