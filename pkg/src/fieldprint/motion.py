"""Collision-free motion planning over a quaternion field.

The partially printed object at a waypoint is a time-varying signed distance
constructed without retraining: a point is inside already-printed material
exactly when phi(x) < 0 and T(x) <= T(p); inside that set the magnitude is
sharpened by the distance to the nearest admissible partition top surface,
approximated along the guidance gradient. The quaternion field (one
sine-MLP with 4 outputs) is trained against collision depth, a support-free
penalty on the local printing direction, and smoothness of the two rotated
axes; outer iterations refine the partition until the exact audit reports
zero collisions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fields import (
    AdamState,
    FieldParams,
    adam_step,
    backward,
    forward,
    siren_init,
)
from .geometry import ExtruderModel
from .guidance import sigmoid
from .partition import (
    PartitionGraph,
    SequenceField,
    label_waypoints,
    refine_partition,
    train_classifier,
)
from .toolpath import WaypointSet

logger = logging.getLogger(__name__)

Array = np.ndarray

QUAT_EPS = 1e-8
IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Quaternion algebra (x, y, z, w convention)


def quat_normalize(q: Array) -> Array:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(n, QUAT_EPS)


def quat_rotate(q: Array, v: Array) -> Array:
    """Rotate vectors by unit quaternions; broadcasts (N,4) x (3,) or (N,3)."""
    q = np.atleast_2d(q)
    v = np.broadcast_to(np.asarray(v, dtype=float), (len(q), 3))
    qv = q[:, :3]
    w = q[:, 3:4]
    t = np.cross(qv, v)
    return (w ** 2 - (qv * qv).sum(axis=1, keepdims=True)) * v \
        + 2.0 * (qv * v).sum(axis=1, keepdims=True) * qv \
        + 2.0 * w * t


def quat_rotate_jac(q: Array, v: Array) -> Array:
    """d(R(q)v)/dq for unit quaternions; returns (N, 3, 4).

    The rotated vector is a quadratic form in q, so this Jacobian is linear
    in q and exact.
    """
    q = np.atleast_2d(q)
    v = np.broadcast_to(np.asarray(v, dtype=float), (len(q), 3))
    n = len(q)
    qv = q[:, :3]
    w = q[:, 3]
    jac = np.empty((n, 3, 4))
    dot = (qv * v).sum(axis=1)
    # d/dqv: -2 v qv^T + 2 qv v^T + 2 (qv.v) I - 2 w [v]x
    vx = np.zeros((n, 3, 3))
    vx[:, 0, 1] = -v[:, 2]
    vx[:, 0, 2] = v[:, 1]
    vx[:, 1, 0] = v[:, 2]
    vx[:, 1, 2] = -v[:, 0]
    vx[:, 2, 0] = -v[:, 1]
    vx[:, 2, 1] = v[:, 0]
    jac[:, :, :3] = (-2.0 * v[:, :, None] * qv[:, None, :]
                     + 2.0 * qv[:, :, None] * v[:, None, :]
                     + 2.0 * dot[:, None, None] * np.eye(3)
                     - 2.0 * w[:, None, None] * vx)
    jac[:, :, 3] = 2.0 * w[:, None] * v + 2.0 * np.cross(qv, v)
    return jac


def _jac_basis(v: Array) -> Array:
    """Constant tensor d(quat_rotate_jac)/dq: (4, 3, 4) for a fixed vector."""
    basis = np.eye(4)
    return np.stack([quat_rotate_jac(basis[c][None], v)[0] for c in range(4)])


def normalize_jacobian(q_raw: Array) -> Array:
    """d(q/||q||)/dq_raw, symmetric (N,4,4)."""
    n = np.maximum(np.linalg.norm(q_raw, axis=1), QUAT_EPS)
    q = q_raw / n[:, None]
    return (np.eye(4)[None] - q[:, :, None] * q[:, None, :]) / n[:, None, None]


def _normalize_jac_pullback(q_raw: Array, pbar: Array) -> Array:
    """Cotangent of the normalize Jacobian P w.r.t. the raw quaternion."""
    n = np.maximum(np.linalg.norm(q_raw, axis=1), QUAT_EPS)
    tr = np.trace(pbar, axis1=1, axis2=2)
    sym = pbar + np.swapaxes(pbar, 1, 2)
    qPq = np.einsum("na,nab,nb->n", q_raw, pbar, q_raw)
    return (-tr[:, None] * q_raw / n[:, None] ** 3
            - np.einsum("nab,nb->na", sym, q_raw) / n[:, None] ** 3
            + 3.0 * qPq[:, None] * q_raw / n[:, None] ** 5)


# ---------------------------------------------------------------------------
# Time-varying SDF (field interpolation, no retraining)


@dataclass
class TvSdfResult:
    phi_t: Array          # signed distance to the partially printed object
    collision: Array      # exact predicate: phi < 0 and T(x) <= T(p)
    updated: Array        # top-surface branch replaced the global phi
    degenerate: Array     # guidance gradient vanished inside material
    direction: Array      # d(phi_t)/dx used by the collision-loss gradient


def tv_sdf(x: Array, t_p: Array, lab_p: Array, phi_field, g_field,
           seq: SequenceField, label_tops: Array) -> TvSdfResult:
    """Evaluate the time-varying SDF at points ``x`` for per-point print steps.

    ``t_p``/``lab_p`` give the sequence value and order-index label of the
    waypoint each query belongs to; ``label_tops[k]`` is the highest guidance
    value printed within label k once that label is complete. Membership in
    the collision set depends only on the exact predicate; the top-surface
    distance approximation sharpens magnitudes, never signs.
    """
    x = np.atleast_2d(x)
    n = len(x)
    phi = phi_field.values(x)
    g_vals = g_field.values(x)
    labels_x = seq.labels(x, g_vals)
    t_x = g_vals + labels_x

    collision = (phi < 0) & (t_x <= t_p)
    phi_t = phi.copy()
    updated = np.zeros(n, dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    direction = np.zeros((n, 3))

    idx = np.flatnonzero(collision)
    if len(idx):
        grad_g = g_field.gradients(x[idx])
        gn = np.linalg.norm(grad_g, axis=1)
        degenerate[idx[gn < 1e-6]] = True
        ok = gn >= 1e-6
        ghat = grad_g[ok] / gn[ok][:, None]
        sub = idx[ok]
        gn_ok = gn[ok]
        n_labels = len(label_tops)
        for k in range(n_labels):
            active = (labels_x[sub] <= k) & (k <= lab_p[sub])
            if not active.any():
                continue
            a = sub[active]
            # current label's printed top is the waypoint's own layer value
            g_k = np.where(k < lab_p[a], label_tops[k], t_p[a] - lab_p[a])
            d_k = (g_k - g_vals[a]) / gn_ok[active]
            cand = (d_k >= 0) & (d_k < np.abs(phi_t[a]))
            if not cand.any():
                continue
            ac = a[cand]
            x_proj = x[ac] + 2.0 * d_k[cand][:, None] * ghat[active][cand]
            lab_proj = seq.labels(x_proj)
            outside_printed = ~((labels_x[ac] <= lab_proj) & (lab_proj <= lab_p[ac]))
            upd = ac[outside_printed]
            phi_t[upd] = -d_k[cand][outside_printed]
            updated[upd] = True

    # gradient direction of phi_t for the chain rule (first-order form)
    need_phi_dir = collision & ~updated
    if need_phi_dir.any():
        direction[need_phi_dir] = phi_field.gradients(x[need_phi_dir])
    if updated.any():
        gg = g_field.gradients(x[updated])
        gg_n = np.linalg.norm(gg, axis=1, keepdims=True)
        direction[updated] = -gg / np.maximum(gg_n, 1e-12)
    return TvSdfResult(phi_t=phi_t, collision=collision, updated=updated,
                       degenerate=degenerate, direction=direction)


def label_top_values(u: Array, labels: Array) -> Array:
    """Highest printed guidance value per order-index label."""
    n_labels = int(labels.max()) + 1 if len(labels) else 0
    tops = np.zeros(n_labels)
    for k in range(n_labels):
        sel = labels == k
        if sel.any():
            tops[k] = u[sel].max()
    return tops


# ---------------------------------------------------------------------------
# Motion losses


@dataclass
class MotionConfig:
    w_coll: float = 10.0
    w_sf: float = 1.0
    w_smooth: float = 0.1
    k_sf: float = 30.0
    alpha_deg: float = 40.0
    batch_waypoints: int = 100000
    epochs: int = 40
    steps_per_epoch: int = 5
    lr: float = 1e-4
    hidden: int = 48
    layers: int = 5
    omega0: float = 10.0
    extruder_stride: int = 4
    max_refinements: int = 3
    seed: int = 0
    smooth_mode: str = "axes"   # "axes" (decoupled) or "quat" (ablation)

    def validate(self):
        if min(self.w_coll, self.w_sf, self.w_smooth) <= 0:
            raise ValueError("motion loss weights must be positive")
        if self.smooth_mode not in ("axes", "quat"):
            raise ValueError("smooth_mode must be 'axes' or 'quat'")


def init_quat_field(cfg: MotionConfig) -> FieldParams:
    sizes = (3,) + (cfg.hidden,) * (cfg.layers - 1) + (4,)
    return siren_init(sizes, omega0=cfg.omega0, rng=cfg.seed + 7,
                      final_bias=IDENTITY_QUAT)


def collision_loss(quat_params, pos: Array, t_p: Array, lab_p: Array,
                   extruder_pts: Array, phi_field, g_field, seq, label_tops,
                   weight: float = 1.0):
    """Mean collision depth over the batch and its parameter gradient."""
    m = len(pos)
    e = len(extruder_pts)
    q_raw, _, _, cache = forward(quat_params, pos, order=0, want_cache=True)
    q = quat_normalize(q_raw)
    # world-frame extruder points for every waypoint: (m, e, 3)
    rot = np.stack([quat_rotate(q, extruder_pts[j]) for j in range(e)], axis=1)
    world = rot + pos[:, None, :]
    flat = world.reshape(-1, 3)
    res = tv_sdf(flat, np.repeat(t_p, e), np.repeat(lab_p, e),
                 phi_field, g_field, seq, label_tops)
    coll = res.collision
    loss = float(-res.phi_t[coll].sum()) / m

    qbar_raw = np.zeros((m, 4))
    if coll.any():
        xbar = (-res.direction[coll]) / m   # d(-phi_t)/dx per colliding point
        wp_idx = np.flatnonzero(coll) // e
        ex_idx = np.flatnonzero(coll) % e
        P = normalize_jacobian(q_raw[wp_idx])
        M = np.empty((len(wp_idx), 3, 4))
        for j in np.unique(ex_idx):
            sel = ex_idx == j
            M[sel] = quat_rotate_jac(q[wp_idx[sel]], extruder_pts[j])
        K = np.matmul(M, P)
        contrib = np.einsum("nka,nk->na", K, xbar)
        np.add.at(qbar_raw, wp_idx, contrib)
    grads = backward(quat_params, cache, weight * qbar_raw)
    rate = float((coll.reshape(m, e).any(axis=1)).mean())
    return weight * loss, grads, {"batch_collision_rate": rate,
                                  "n_collision_points": int(coll.sum())}


def support_free_motion_loss(quat_params, pos: Array, normals_unit: Array,
                             k_sf: float, alpha_deg: float, weight: float = 1.0):
    """Sigmoid overhang penalty on the rotated printing direction."""
    m = len(pos)
    q_raw, _, _, cache = forward(quat_params, pos, order=0, want_cache=True)
    q = quat_normalize(q_raw)
    lpd = quat_rotate(q, np.array([0.0, 0.0, 1.0]))
    dot = (lpd * normals_unit).sum(axis=1)
    t = k_sf * (np.abs(dot) - np.sin(np.radians(alpha_deg)))
    sig = sigmoid(t)
    loss = float(sig.mean())
    lpd_bar = (sig * (1 - sig) * k_sf * np.sign(dot) / m)[:, None] * normals_unit
    K = np.matmul(quat_rotate_jac(q, np.array([0.0, 0.0, 1.0])),
                  normalize_jacobian(q_raw))
    qbar_raw = np.einsum("nka,nk->na", K, lpd_bar)
    grads = backward(quat_params, cache, weight * qbar_raw)
    viol = float((np.abs(dot) > np.sin(np.radians(alpha_deg))).mean())
    return weight * loss, grads, {"sf_violation_fraction": viol}


_ZBASIS = _jac_basis(np.array([0.0, 0.0, 1.0]))
_XBASIS = _jac_basis(np.array([1.0, 0.0, 0.0]))


def smoothness_motion_loss(quat_params, pos: Array, weight: float = 1.0,
                           mode: str = "axes"):
    """Smoothness of the motion field.

    ``axes`` penalizes the spatial Jacobians of the printing direction
    R(q) z and the self-rotation axis R(q) x (decoupled form); ``quat``
    penalizes the raw quaternion Jacobian directly (the ablation baseline).
    """
    m = len(pos)
    q_raw, jq, _, cache = forward(quat_params, pos, order=1, want_cache=True)
    jq = jq  # (m, 4, 3)
    if mode == "quat":
        loss = float(np.einsum("nad,nad->", jq, jq)) / m
        grads = backward(quat_params, cache, None, (2.0 * weight / m) * jq)
        return weight * loss, grads, {}

    n = np.maximum(np.linalg.norm(q_raw, axis=1), QUAT_EPS)
    q = q_raw / n[:, None]
    P = normalize_jacobian(q_raw)
    loss = 0.0
    qbar_raw = np.zeros((m, 4))
    jq_bar = np.zeros_like(jq)
    for basis, axis in ((_ZBASIS, np.array([0.0, 0.0, 1.0])),
                        (_XBASIS, np.array([1.0, 0.0, 0.0]))):
        M = quat_rotate_jac(q, axis)          # (m, 3, 4)
        K = np.matmul(M, P)                   # (m, 3, 4)
        grad_axis = np.matmul(K, jq)          # (m, 3, 3)
        loss += float(np.einsum("nde,nde->", grad_axis, grad_axis)) / m
        G = (2.0 / m) * grad_axis
        kbar = np.matmul(G, np.swapaxes(jq, 1, 2))          # (m, 3, 4)
        jq_bar += np.matmul(np.swapaxes(K, 1, 2), G)        # (m, 4, 3)
        mbar = np.matmul(kbar, np.swapaxes(P, 1, 2))        # (m, 3, 4)
        pbar = np.matmul(np.swapaxes(M, 1, 2), kbar)        # (m, 4, 4)
        q_unit_bar = np.einsum("nij,cij->nc", mbar, basis)
        qbar_raw += np.einsum("nab,nb->na", P, q_unit_bar)
        qbar_raw += _normalize_jac_pullback(q_raw, pbar)
    grads = backward(quat_params, cache, weight * qbar_raw, weight * jq_bar)
    return weight * loss, grads, {}


def motion_losses(quat_params, pos, surf_mask, normals_unit, cfg: MotionConfig):
    """Support-free + smoothness bundle (collision handled separately)."""
    gw = [np.zeros_like(w) for w in quat_params.weights]
    gb = [np.zeros_like(b) for b in quat_params.biases]
    terms = {}

    if surf_mask.any():
        v_sf, g_sf, info = support_free_motion_loss(
            quat_params, pos[surf_mask], normals_unit[surf_mask],
            cfg.k_sf, cfg.alpha_deg, weight=cfg.w_sf)
        terms["sf"] = v_sf
        terms.update(info)
        for i in range(len(gw)):
            gw[i] += g_sf[0][i]
            gb[i] += g_sf[1][i]
    v_sm, g_sm, _ = smoothness_motion_loss(quat_params, pos, weight=cfg.w_smooth,
                                           mode=cfg.smooth_mode)
    terms["smooth"] = v_sm
    for i in range(len(gw)):
        gw[i] += g_sm[0][i]
        gb[i] += g_sm[1][i]
    return sum(v for k, v in terms.items() if k in ("sf", "smooth")), (gw, gb), terms


# ---------------------------------------------------------------------------
# Exact audit and the refinement loop


def collision_audit(wps: WaypointSet, quat_params, extruder_pts: Array,
                    phi_field, g_field, seq, label_tops,
                    chunk: int = 200) -> dict:
    """Exact collision rate over all waypoints with the full extruder cloud.

    Returns r_coll, colliding waypoint ids, and (obstacle label, obstacle u)
    rows for partition refinement.
    """
    n = len(wps)
    t_p = wps.seq
    lab_p = wps.label
    colliding = np.zeros(n, dtype=bool)
    report_rows = []
    e = len(extruder_pts)
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        pos = wps.pos[sl]
        q_raw, _, _ = forward(quat_params, pos)
        q = quat_normalize(q_raw)
        rot = np.stack([quat_rotate(q, extruder_pts[j]) for j in range(e)], axis=1)
        world = (rot + pos[:, None, :]).reshape(-1, 3)
        phi = phi_field.values(world)
        maybe = phi < 0
        if not maybe.any():
            continue
        g_vals = g_field.values(world[maybe])
        labels_x = seq.labels(world[maybe], g_vals)
        t_x = g_vals + labels_x
        t_rep = np.repeat(t_p[sl], e)[maybe]
        hit = t_x <= t_rep
        if hit.any():
            pair_idx = np.flatnonzero(maybe)[hit]
            wp_ids = s + pair_idx // e
            colliding[wp_ids] = True
            for lab, u in zip(labels_x[hit], g_vals[hit]):
                report_rows.append((int(lab), float(u)))
    r_coll = float(colliding.mean())
    return {"r_coll": r_coll, "colliding_ids": np.flatnonzero(colliding),
            "rows": report_rows}


def plan_motion(wps: WaypointSet, phi_field, g_field, graph: PartitionGraph,
                extruder: ExtruderModel, cfg: MotionConfig | None = None,
                train_label_classifier: bool = True):
    """Train the quaternion field and refine the partition until collision-free.

    Returns (waypoints with quat/lpd/seq/label filled, report). The report
    carries the per-iteration exact collision rate; a nonzero final rate at
    the refinement cap is recorded as a failure.
    """
    cfg = cfg or MotionConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    ex_full = extruder.points / wps.scale_mm
    ex_train = ex_full[::max(cfg.extruder_stride, 1)]

    surf_mask = np.isnan(wps.v)
    grad_phi = phi_field.gradients(wps.pos)
    normals = grad_phi / np.maximum(np.linalg.norm(grad_phi, axis=1, keepdims=True), 1e-12)

    quat_params = init_quat_field(cfg)
    history = []
    classifier_report = None
    refinements = 0

    while True:
        labels = label_waypoints(graph, wps)
        wps.label = labels
        wps.seq = wps.u + labels
        label_tops = label_top_values(wps.u, labels)
        seq = SequenceField(g_field, graph=graph, strict=True)
        if train_label_classifier:
            classifier, classifier_report = train_classifier(wps, labels)

        state = AdamState.for_params(quat_params, lr=cfg.lr)
        n = len(wps)
        for epoch in range(cfg.epochs):
            for _ in range(cfg.steps_per_epoch):
                pick = rng.choice(n, size=min(cfg.batch_waypoints, n), replace=False)
                l_coll, g_coll, info = collision_loss(
                    quat_params, wps.pos[pick], wps.seq[pick], labels[pick],
                    ex_train, phi_field, g_field, seq, label_tops,
                    weight=cfg.w_coll)
                l_rest, g_rest, terms = motion_losses(
                    quat_params, wps.pos[pick], surf_mask[pick], normals[pick], cfg)
                gw, gb = g_coll
                for i in range(len(gw)):
                    gw[i] += g_rest[0][i]
                    gb[i] += g_rest[1][i]
                adam_step(quat_params, (gw, gb), state, context="motion loss")
            if epoch % 5 == 0:
                logger.info("motion round %d epoch %d: coll %.4f (batch rate %.3f) "
                            "sf %.4f smooth %.4f", refinements, epoch, l_coll,
                            info["batch_collision_rate"], terms.get("sf", 0.0),
                            terms["smooth"])

        audit = collision_audit(wps, quat_params, ex_full, phi_field, g_field,
                                seq, label_tops)
        history.append({"refinement": refinements, "r_coll": audit["r_coll"],
                        "n_labels": graph.n_labels})
        logger.info("motion round %d audit: r_coll %.4f (labels %d)",
                    refinements, audit["r_coll"], graph.n_labels)
        if audit["r_coll"] == 0.0:
            break
        if refinements >= cfg.max_refinements:
            break
        graph = refine_partition(graph, audit["rows"])
        refinements += 1
        # warm start: keep quaternion parameters across refinements

    q_raw, _, _ = forward(quat_params, wps.pos)
    wps.quat = quat_normalize(q_raw)
    wps.lpd = quat_rotate(wps.quat, np.array([0.0, 0.0, 1.0]))

    report = {
        "r_coll_history": history,
        "final_r_coll": history[-1]["r_coll"],
        "refinements": refinements,
        "n_labels": graph.n_labels,
        "classifier": classifier_report,
        "colliding_ids": history[-1]["r_coll"] > 0 and audit["colliding_ids"].tolist() or [],
    }
    if history[-1]["r_coll"] > 0:
        report["failure"] = (f"collision rate {history[-1]['r_coll']:.4f} after "
                             f"{refinements} refinements")
        logger.error(report["failure"])
    return wps, graph, quat_params, report
