"""Finite-difference oracles for every training loss in the package.

Each test freezes a small random net and batch, computes the analytic
parameter gradient, and compares against central differences of the scalar
loss; the whole module is the derivative-correctness gate and must stay fast.
"""

import numpy as np
import pytest

from fieldprint import guidance, infill, motion
from fieldprint.fields import forward
from fieldprint.guidance import GuidanceConfig, SurfaceBatch
from fieldprint.infill import InfillConfig
from fieldprint.motion import MotionConfig
from fieldprint.sampling import SampleSet
from fieldprint.sdf import SdfLossWeights, sdf_loss

from helpers import fd_param_grad, pack_grads, rel_err, small_net

TOL = 1e-4  # acceptance tolerance for loss-gradient checks


@pytest.fixture(scope="module")
def sdf_net():
    return small_net(1, sizes=(3, 8, 8, 1))


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(42)


class TestSdfLoss:
    def test_full_gradient(self):
        net = small_net(2, sizes=(3, 6, 6, 1))
        r = np.random.default_rng(0)
        pts = r.normal(size=(5, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        nrm = pts.copy()
        w = np.full(5, 0.2)
        batch = SampleSet(0.5 * pts, nrm, w, offsurface=r.uniform(-1, 1, (6, 3)))
        weights = SdfLossWeights()

        def loss(p):
            val, _, _ = sdf_loss(p, batch, weights)
            return val

        _, grads, _ = sdf_loss(net, batch, weights)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL


class TestGuidanceLosses:
    def _surface_batch(self, sdf_net, n=4, seed=3):
        r = np.random.default_rng(seed)
        x = 0.5 * r.uniform(-1, 1, (n, 3))
        _, g, h = forward(sdf_net, x, order=2)
        grad_phi = g[:, 0, :]
        nrm = grad_phi / np.linalg.norm(grad_phi, axis=1, keepdims=True)
        d_kappa = r.normal(size=(n, 3))
        d_kappa /= np.linalg.norm(d_kappa, axis=1, keepdims=True)
        v_frozen = r.normal(size=(n, 3))
        return SurfaceBatch(x=x, normal_unit=nrm, grad_phi=grad_phi,
                            hess_phi=h[:, 0], d_kappa=d_kappa, v_frozen=v_frozen)

    def test_warmup(self, sdf_net):
        net = small_net(4, sizes=(3, 6, 6, 1))
        cfg = GuidanceConfig()
        sb = self._surface_batch(sdf_net)
        bottom = np.random.default_rng(5).uniform(-0.5, 0.5, (3, 3))

        def loss(p):
            return guidance.warmup_loss(p, sb, bottom, cfg)[0]

        _, grads, _ = guidance.warmup_loss(net, sb, bottom, cfg)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL

    def test_surface_stage(self, sdf_net):
        # exercises the tangent-Jacobian path through both Hessians
        net = small_net(6, sizes=(3, 6, 6, 1))
        cfg = GuidanceConfig()
        sb = self._surface_batch(sdf_net, seed=7)
        bottom = np.random.default_rng(8).uniform(-0.5, 0.5, (3, 3))

        def loss(p):
            return guidance.surface_stage_loss(p, sb, bottom, cfg)[0]

        _, grads, _ = guidance.surface_stage_loss(net, sb, bottom, cfg)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL

    def test_interior_stage(self, sdf_net):
        net = small_net(9, sizes=(3, 6, 6, 1))
        cfg = GuidanceConfig()
        sb = self._surface_batch(sdf_net, seed=10)
        interior = np.random.default_rng(11).uniform(-0.5, 0.5, (5, 3))

        def loss(p):
            return guidance.interior_stage_loss(p, interior, sb, cfg)[0]

        _, grads, _ = guidance.interior_stage_loss(net, interior, sb, cfg)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL


class TestInfillLoss:
    def test_gradient(self):
        net = small_net(12, sizes=(3, 6, 6, 1))
        r = np.random.default_rng(13)
        x = 0.5 * r.uniform(-1, 1, (5, 3))
        ghat = r.normal(size=(5, 3))
        ghat /= np.linalg.norm(ghat, axis=1, keepdims=True)
        rho = np.full(5, 4.0)
        d_int = infill.infill_reference_dir(ghat, 45.0, np.array([1.0, 0.0, 0.0]))
        cfg = InfillConfig()

        def loss(p):
            return infill.infill_loss(p, x, ghat, rho, d_int, cfg, cfg.w_ref)[0]

        _, grads, _ = infill.infill_loss(net, x, ghat, rho, d_int, cfg, cfg.w_ref)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL


class TestQuaternionMath:
    def test_rotate_matches_matrix(self, rng):
        q = motion.quat_normalize(rng.normal(size=(20, 4)))
        v = rng.normal(size=(20, 3))
        got = motion.quat_rotate(q, v)
        for i in range(20):
            x, y, z, w = q[i]
            R = np.array([
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ])
            assert np.allclose(got[i], R @ v[i], atol=1e-12)

    def test_rotate_jac_fd(self, rng):
        q = motion.quat_normalize(rng.normal(size=(6, 4)))
        v = rng.normal(size=(6, 3))
        jac = motion.quat_rotate_jac(q, v)
        h = 1e-7
        for c in range(4):
            e = np.zeros(4)
            e[c] = h
            fd = (motion.quat_rotate(q + e, v) - motion.quat_rotate(q - e, v)) / (2 * h)
            assert np.abs(jac[:, :, c] - fd).max() < 1e-6

    def test_normalize_jacobian_fd(self, rng):
        q = rng.normal(size=(6, 4)) * 2
        P = motion.normalize_jacobian(q)
        h = 1e-7
        for c in range(4):
            e = np.zeros(4)
            e[c] = h
            fd = (motion.quat_normalize(q + e) - motion.quat_normalize(q - e)) / (2 * h)
            assert np.abs(P[:, :, c] - fd).max() < 1e-6

    def test_normalize_jac_pullback_fd(self, rng):
        q0 = rng.normal(size=(3, 4)) * 1.5
        pbar = rng.normal(size=(3, 4, 4))

        def scalar(q):
            return float((motion.normalize_jacobian(q) * pbar).sum())

        got = motion._normalize_jac_pullback(q0, pbar)
        h = 1e-6
        for c in range(4):
            e = np.zeros(4)
            e[c] = h
            fd = (scalar(q0 + e) - scalar(q0 - e)) / (2 * h)
            assert np.abs(got[:, c].sum() - fd) < 1e-5 * max(1.0, abs(fd))


class TestMotionLosses:
    def test_support_free(self, rng):
        net = small_net(14, sizes=(3, 6, 6, 4), final_bias=motion.IDENTITY_QUAT)
        x = 0.5 * rng.uniform(-1, 1, (5, 3))
        nrm = rng.normal(size=(5, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)

        def loss(p):
            return motion.support_free_motion_loss(p, x, nrm, 30.0, 40.0, 1.0)[0]

        _, grads, _ = motion.support_free_motion_loss(net, x, nrm, 30.0, 40.0, 1.0)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL

    @pytest.mark.parametrize("mode", ["axes", "quat"])
    def test_smoothness(self, rng, mode):
        net = small_net(15, sizes=(3, 6, 6, 4), final_bias=motion.IDENTITY_QUAT)
        x = 0.5 * rng.uniform(-1, 1, (4, 3))

        def loss(p):
            return motion.smoothness_motion_loss(p, x, 1.0, mode)[0]

        _, grads, _ = motion.smoothness_motion_loss(net, x, 1.0, mode)
        assert rel_err(pack_grads(*grads), fd_param_grad(loss, net)) < TOL

    def test_collision_chain_rule(self, rng):
        # Gradient must match finite differences of the first-order loss:
        # collision membership and descent directions frozen at the base
        # parameters, positions moving with the quaternion field.
        from fieldprint.fields import AnalyticField
        from fieldprint.fixtures import sd_box
        from fieldprint.partition import SequenceField

        net = small_net(16, sizes=(3, 6, 6, 4), final_bias=motion.IDENTITY_QUAT)
        phi = AnalyticField(lambda x: sd_box(x, (0.6, 0.6, 0.2)))
        g = AnalyticField(lambda x: (x[:, 2] + 1) / 2)

        class OneLabel:
            def labels(self, x, g_vals=None):
                return np.zeros(len(x), dtype=int)

        seq = OneLabel()
        pos = np.array([[0.0, 0.0, 0.1], [0.2, 0.0, 0.15]])
        t_p = (pos[:, 2] + 1) / 2
        lab_p = np.zeros(2, dtype=int)
        ex = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -0.15], [0.1, 0.0, -0.1]])
        tops = np.array([1.0])

        _, grads, info = motion.collision_loss(net, pos, t_p, lab_p, ex, phi, g,
                                               seq, tops)
        assert info["n_collision_points"] > 0

        q_raw0, _, _ = forward(net, pos)
        q0 = motion.quat_normalize(q_raw0)
        rot0 = np.stack([motion.quat_rotate(q0, ex[j]) for j in range(len(ex))], axis=1)
        world0 = (rot0 + pos[:, None, :]).reshape(-1, 3)
        res0 = motion.tv_sdf(world0, np.repeat(t_p, len(ex)),
                             np.repeat(lab_p, len(ex)), phi, g, seq, tops)

        def frozen_loss(p):
            q_raw, _, _ = forward(p, pos)
            q = motion.quat_normalize(q_raw)
            rot = np.stack([motion.quat_rotate(q, ex[j]) for j in range(len(ex))],
                           axis=1)
            world = (rot + pos[:, None, :]).reshape(-1, 3)
            disp = world - world0
            return float(np.einsum(
                "nd,nd->", -res0.direction[res0.collision], disp[res0.collision]
            )) / len(pos)

        assert rel_err(pack_grads(*grads), fd_param_grad(frozen_loss, net)) < TOL
