"""Guidance field training: warm-up, surface stage, interior stage.

The guidance scalar field's iso-surfaces are the curved printing layers. Its
gradient, projected onto the model's tangent plane, gives the shell
deposition direction; training balances tangent-field smoothness, a relaxed
support-free penalty, a bottom Neumann condition that anchors growth to the
build direction, interior Dirichlet smoothness, and boundary alignment. The
warm-up stage seeds the gradient with the minimum principal curvature
direction. After training the field is affinely rescaled to [0, 1] over the
model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fields import (
    AdamState,
    FieldParams,
    NumericError,
    adam_step,
    backward,
    forward,
    siren_init,
)
from .geometry import ModelCloud
from .sampling import SampleSet, stratified_samples
from .sdf import curvature_dirs

logger = logging.getLogger(__name__)

Array = np.ndarray

SINGULARITY_EPS = 1e-2
SURFACE_BAND = 5e-3


def sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


@dataclass
class GuidanceConfig:
    w_smooth_s: float = 1.0
    w_sf_s: float = 0.5
    w_coll_ob: float = 1.0
    w_kappa: float = 1.0
    w_smooth_omega: float = 1.0
    w_align: float = 10.0
    k_sf: float = 30.0
    alpha_deg: float = 40.0
    epochs_warmup: int = 20
    epochs_surface: int = 60
    epochs_interior: int = 60
    steps_per_epoch: int = 10
    batch: int = 1024
    lr: float = 1e-4
    hidden: int = 64
    layers: int = 5
    omega0: float = 30.0
    h_bottom: float = 0.05
    seed: int = 0

    def validate(self):
        weights = [self.w_smooth_s, self.w_sf_s, self.w_coll_ob, self.w_kappa,
                   self.w_smooth_omega, self.w_align]
        if any(w <= 0 for w in weights):
            raise ValueError("guidance loss weights must be positive")
        if min(self.epochs_warmup, self.epochs_surface, self.epochs_interior) <= 0:
            raise ValueError("stage epoch counts must be positive")


def tangent_project(grad_g: Array, grad_phi: Array) -> Array:
    """Project field gradients onto the tangent plane of the level set.

    ``v = g - (<g, p>/||p||^2) p`` for each row; exact orthogonality to p.
    """
    grad_g = np.atleast_2d(grad_g)
    grad_phi = np.atleast_2d(grad_phi)
    r = np.einsum("nd,nd->n", grad_phi, grad_phi)
    if np.sqrt(r.min(initial=np.inf)) <= 1e-8:
        raise ValueError("degenerate surface gradient in tangent projection")
    s = np.einsum("nd,nd->n", grad_g, grad_phi)
    return grad_g - (s / r)[:, None] * grad_phi


# ---------------------------------------------------------------------------
# Per-term values and gradient cotangents (all vectorized over the batch)


def _unit_rows(v, eps=1e-12):
    n = np.linalg.norm(v, axis=1)
    return v / np.maximum(n, eps)[:, None], n


def bottom_term(grad_g):
    """Neumann condition on the bottom slab: 1 - <unit grad, z>. Returns
    (per-point values, cotangent w.r.t. grad_g)."""
    zhat = np.array([0.0, 0.0, 1.0])
    ghat, gn = _unit_rows(grad_g)
    m = ghat @ zhat
    vals = 1.0 - m
    cot = -(zhat[None, :] - m[:, None] * ghat) / np.maximum(gn, 1e-12)[:, None]
    return vals, cot


def support_free_term(grad_g, normal_unit, k_sf, alpha_deg):
    """Sigmoid-relaxed overhang penalty per point and its grad_g cotangent."""
    ghat, gn = _unit_rows(grad_g)
    m = np.einsum("nd,nd->n", ghat, normal_unit)
    t = k_sf * (np.abs(m) - np.sin(np.radians(alpha_deg)))
    sig = sigmoid(t)
    dsig = sig * (1 - sig) * k_sf * np.sign(m)
    cot = dsig[:, None] * (normal_unit - m[:, None] * ghat) / np.maximum(gn, 1e-12)[:, None]
    return sig, cot


def tangent_jacobian(grad_g, hess_g, grad_phi, hess_phi):
    """Spatial Jacobian of the projected tangent field at surface points.

    Differentiates v(x) = a - (<a,b>/<b,b>) b with a = grad_g(x),
    b = grad_phi(x) through both fields' Hessians. Shapes: (N,3,3).
    """
    a, A = grad_g, hess_g
    b, B = grad_phi, hess_phi
    r = np.einsum("nd,nd->n", b, b)
    s = np.einsum("nd,nd->n", a, b)
    u = np.einsum("nde,ne->nd", A, b) + np.einsum("nde,ne->nd", B, a)
    w = np.einsum("nde,ne->nd", B, b)
    J = (A
         - b[:, :, None] * u[:, None, :] / r[:, None, None]
         + 2.0 * (s / r ** 2)[:, None, None] * b[:, :, None] * w[:, None, :]
         - (s / r)[:, None, None] * B)
    return J


def tangent_smoothness_term(grad_g, hess_g, grad_phi, hess_phi):
    """||J_v||_F^2 per surface point plus cotangents w.r.t. (grad_g, hess_g)."""
    a, A = grad_g, hess_g
    b, B = grad_phi, hess_phi
    r = np.einsum("nd,nd->n", b, b)
    s = np.einsum("nd,nd->n", a, b)
    u = np.einsum("nde,ne->nd", A, b) + np.einsum("nde,ne->nd", B, a)
    w = np.einsum("nde,ne->nd", B, b)
    J = tangent_jacobian(grad_g, hess_g, grad_phi, hess_phi)
    vals = np.einsum("nde,nde->n", J, J)
    G = 2.0 * J
    # dL/dA: direct term plus the u = A b + B a path
    ubar = -np.einsum("nde,nd->ne", G, b) / r[:, None]
    cot_A = G + ubar[:, :, None] * b[:, None, :]
    # dL/ds from the two s-dependent terms
    sbar = (2.0 / r ** 2) * np.einsum("nd,nde,ne->n", b, G, w) \
        - np.einsum("nde,nde->n", G, B) / r
    cot_a = np.einsum("nde,nd->ne", B, ubar) + sbar[:, None] * b
    return vals, cot_a, cot_A


def warmup_term(grad_g, d_kappa):
    """Curvature-direction alignment 1 - <grad g, d_kappa> (raw gradient)."""
    vals = 1.0 - np.einsum("nd,nd->n", grad_g, d_kappa)
    return vals, -d_kappa


def align_term(grad_g, v_frozen):
    """Boundary alignment 1 - <grad g, v_frozen> with frozen tangents."""
    vals = 1.0 - np.einsum("nd,nd->n", grad_g, v_frozen)
    return vals, -v_frozen


def dirichlet_term(grad_g):
    """Interior smoothness ||grad g||^2."""
    vals = np.einsum("nd,nd->n", grad_g, grad_g)
    return vals, 2.0 * grad_g


def _guard(name, value):
    if not np.isfinite(value):
        raise NumericError(f"non-finite value in guidance loss term '{name}'")
    return value


# ---------------------------------------------------------------------------
# Stage losses (value + parameter gradient)


@dataclass
class SurfaceBatch:
    """Cached per-point surface quantities the guidance losses consume."""

    x: Array
    normal_unit: Array          # unit SDF gradient
    grad_phi: Array             # raw SDF gradient
    hess_phi: Array
    d_kappa: Array | None = None
    v_frozen: Array | None = None


def warmup_loss(g_params, surf: SurfaceBatch, bottom_x: Array, cfg: GuidanceConfig):
    """Bottom Neumann term + curvature-direction alignment."""
    terms = {}
    gw = [np.zeros_like(w) for w in g_params.weights]
    gb = [np.zeros_like(b) for b in g_params.biases]

    _, g, _, cache = forward(g_params, surf.x, order=1, want_cache=True)
    vals, cot = warmup_term(g[:, 0, :], surf.d_kappa)
    n = len(surf.x)
    terms["kappa"] = _guard("kappa", cfg.w_kappa * vals.mean())
    dw, db = backward(g_params, cache, None, (cfg.w_kappa / n) * cot[:, None, :])
    for i in range(len(gw)):
        gw[i] += dw[i]
        gb[i] += db[i]

    if len(bottom_x):
        _, g, _, cache = forward(g_params, bottom_x, order=1, want_cache=True)
        vals, cot = bottom_term(g[:, 0, :])
        terms["bottom"] = _guard("bottom", cfg.w_coll_ob * vals.mean())
        dw, db = backward(g_params, cache, None,
                          (cfg.w_coll_ob / len(bottom_x)) * cot[:, None, :])
        for i in range(len(gw)):
            gw[i] += dw[i]
            gb[i] += db[i]
    else:
        terms["bottom"] = 0.0
    return sum(terms.values()), (gw, gb), terms


def surface_stage_loss(g_params, surf: SurfaceBatch, bottom_x: Array, cfg: GuidanceConfig):
    """Tangent-field smoothness + relaxed support-free + bottom Neumann."""
    terms = {}
    n = len(surf.x)
    _, g, h, cache = forward(g_params, surf.x, order=2, want_cache=True)
    grad_g = g[:, 0, :]
    hess_g = h[:, 0, :, :]

    sm_vals, sm_cot_a, sm_cot_A = tangent_smoothness_term(
        grad_g, hess_g, surf.grad_phi, surf.hess_phi)
    sf_vals, sf_cot = support_free_term(grad_g, surf.normal_unit, cfg.k_sf, cfg.alpha_deg)
    terms["smooth_s"] = _guard("smooth_s", cfg.w_smooth_s * sm_vals.mean())
    terms["sf_s"] = _guard("sf_s", cfg.w_sf_s * sf_vals.mean())
    cot_grad = (cfg.w_smooth_s * sm_cot_a + cfg.w_sf_s * sf_cot) / n
    cot_hess = (cfg.w_smooth_s / n) * sm_cot_A
    gw, gb = backward(g_params, cache, None, cot_grad[:, None, :], cot_hess[:, None])

    if len(bottom_x):
        _, g, _, cache = forward(g_params, bottom_x, order=1, want_cache=True)
        vals, cot = bottom_term(g[:, 0, :])
        terms["bottom"] = _guard("bottom", cfg.w_coll_ob * vals.mean())
        dw, db = backward(g_params, cache, None,
                          (cfg.w_coll_ob / len(bottom_x)) * cot[:, None, :])
        for i in range(len(gw)):
            gw[i] += dw[i]
            gb[i] += db[i]
    else:
        terms["bottom"] = 0.0
    return sum(terms.values()), (gw, gb), terms


def _dirichlet_loss(g_params, interior_x: Array, cfg: GuidanceConfig):
    _, g, _, cache = forward(g_params, interior_x, order=1, want_cache=True)
    vals, cot = dirichlet_term(g[:, 0, :])
    value = _guard("smooth_omega", cfg.w_smooth_omega * vals.mean())
    grads = backward(g_params, cache, None,
                     (cfg.w_smooth_omega / len(interior_x)) * cot[:, None, :])
    return value, grads


def interior_stage_loss(g_params, interior_x: Array, surf: SurfaceBatch,
                        cfg: GuidanceConfig):
    """Interior Dirichlet smoothness + alignment to the frozen surface tangents."""
    if len(interior_x) == 0:
        raise ValueError("interior stage requires a non-empty interior stratum")
    terms = {}
    terms["smooth_omega"], (gw, gb) = _dirichlet_loss(g_params, interior_x, cfg)

    _, g, _, cache = forward(g_params, surf.x, order=1, want_cache=True)
    vals, cot = align_term(g[:, 0, :], surf.v_frozen)
    terms["align"] = _guard("align", cfg.w_align * vals.mean())
    dw, db = backward(g_params, cache, None,
                      (cfg.w_align / len(surf.x)) * cot[:, None, :])
    for i in range(len(gw)):
        gw[i] += dw[i]
        gb[i] += db[i]
    return sum(terms.values()), (gw, gb), terms


# ---------------------------------------------------------------------------
# Training driver


def _surface_cache(sdf_params, x, want_kappa: bool):
    _, g, h = forward(sdf_params, x, order=2)
    grad_phi = g[:, 0, :]
    hess_phi = h[:, 0, :, :]
    nrm, _ = _unit_rows(grad_phi)
    d_kappa = None
    if want_kappa:
        d_min, _, _, _, _ = curvature_dirs(sdf_params, x, band=np.inf)
        # principal directions are sign-ambiguous: vote toward +z, then +x, +y
        flip = d_min[:, 2] < 0
        near_horizontal = np.abs(d_min[:, 2]) < 1e-3
        flip = np.where(near_horizontal, d_min[:, 0] < 0, flip)
        near_x0 = near_horizontal & (np.abs(d_min[:, 0]) < 1e-3)
        flip = np.where(near_x0, d_min[:, 1] < 0, flip)
        d_kappa = np.where(flip[:, None], -d_min, d_min)
    return SurfaceBatch(x=x, normal_unit=nrm, grad_phi=grad_phi,
                        hess_phi=hess_phi, d_kappa=d_kappa)


def normalize_field(params: FieldParams, probe_x: Array):
    """Affinely rescale the scalar output to [0,1] over the probe points.

    Folds the rescale into the last linear layer, so the network form is
    unchanged; returns (params, (lo, hi)) with the original value range.
    """
    v, _, _ = forward(params, probe_x)
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    if span <= 0:
        raise ValueError("field is constant; cannot normalize")
    out = params.copy()
    out.weights[-1] = out.weights[-1] / span
    out.biases[-1] = (out.biases[-1] - lo) / span
    return out, (lo, hi)


def singularity_census(v_t_norms: Array, probe_x: Array, eps: float = SINGULARITY_EPS,
                       cluster_radius: float = 0.05):
    """Cluster surface probes whose tangent-field magnitude is below eps.

    Returns a list of cluster dicts (centroid, size, min magnitude).
    """
    mask = v_t_norms < eps
    pts = probe_x[mask]
    if len(pts) == 0:
        return []
    tree = cKDTree(pts)
    pairs = tree.query_pairs(cluster_radius, output_type="ndarray")
    parent = np.arange(len(pts))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(pts))])
    clusters = []
    for r in np.unique(roots):
        sel = roots == r
        clusters.append({
            "centroid": pts[sel].mean(axis=0),
            "size": int(sel.sum()),
            "min_norm": float(v_t_norms[mask][sel].min()),
        })
    clusters.sort(key=lambda c: tuple(c["centroid"]))
    return clusters


def surface_tangents(g_params, sdf_params, x: Array):
    """v_T and its norms at surface points for the trained pair (g, phi)."""
    _, gg, _ = forward(g_params, x, order=1)
    _, gp, _ = forward(sdf_params, x, order=1)
    v = tangent_project(gg[:, 0, :], gp[:, 0, :])
    return v, np.linalg.norm(v, axis=1)


@dataclass
class GuidanceResult:
    params: FieldParams
    value_range: tuple
    report: dict
    v_frozen_points: Array = None
    v_frozen: Array = None


def train_guidance(sdf_params, cloud: ModelCloud, cfg: GuidanceConfig | None = None,
                   samples: SampleSet | None = None, single_stage: bool = False):
    """Run warm-up, surface and interior stages; returns GuidanceResult.

    ``single_stage`` combines every term in one schedule using the same total
    step budget (the ablation baseline; live tangents instead of frozen ones).
    """
    cfg = cfg or GuidanceConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if samples is None:
        samples = stratified_samples(
            cloud, sdf_params,
            counts={"surface": min(len(cloud.points), 20000), "interior": 20000,
                    "offsurface": 0, "bottom": 4000},
            h_bottom=cfg.h_bottom, seed=cfg.seed)

    # keep only points inside the surface band of the trained SDF
    v, _, _ = forward(sdf_params, samples.surface_points)
    band = np.abs(v[:, 0]) < SURFACE_BAND
    surf_x = samples.surface_points[band]
    if len(surf_x) < 100:
        raise ValueError("too few cloud points inside the SDF surface band")
    surf_all = _surface_cache(sdf_params, surf_x, want_kappa=True)
    interior = samples.interior
    bottom = samples.bottom

    sizes = (3,) + (cfg.hidden,) * (cfg.layers - 1) + (1,)
    params = siren_init(sizes, omega0=cfg.omega0, rng=cfg.seed + 1)
    state = AdamState.for_params(params, lr=cfg.lr)
    curves = {"warmup": [], "surface": [], "interior": [], "single": []}

    def surf_batch(idx):
        return SurfaceBatch(
            x=surf_all.x[idx], normal_unit=surf_all.normal_unit[idx],
            grad_phi=surf_all.grad_phi[idx], hess_phi=surf_all.hess_phi[idx],
            d_kappa=None if surf_all.d_kappa is None else surf_all.d_kappa[idx],
            v_frozen=None if surf_all.v_frozen is None else surf_all.v_frozen[idx],
        )

    def pick(pool_len, size):
        return rng.choice(pool_len, size=min(size, pool_len), replace=False)

    n_steps_total = (cfg.epochs_warmup + cfg.epochs_surface
                     + cfg.epochs_interior) * cfg.steps_per_epoch

    if single_stage:
        for step in range(n_steps_total):
            sb = surf_batch(pick(len(surf_x), cfg.batch))
            bx = bottom[pick(len(bottom), cfg.batch // 2)] if len(bottom) else bottom
            ix = interior[pick(len(interior), cfg.batch)]
            loss_s, grads_s, terms_s = surface_stage_loss(params, sb, bx, cfg)
            # live tangents: alignment reduces to 1 - ||v_T||^2
            _, gg, _, cache = forward(params, sb.x, order=1, want_cache=True)
            v_t = tangent_project(gg[:, 0, :], sb.grad_phi)
            a_vals = 1.0 - np.einsum("nd,nd->n", v_t, v_t)
            proj = np.eye(3)[None] - (sb.grad_phi[:, :, None] * sb.grad_phi[:, None, :]
                                      / np.einsum("nd,nd->n", sb.grad_phi, sb.grad_phi)[:, None, None])
            cot = -2.0 * np.einsum("nde,ne->nd", proj, v_t) / len(sb.x)
            dw, db = backward(params, cache, None, (cfg.w_align * cot)[:, None, :])
            gw, gb = grads_s
            for i in range(len(gw)):
                gw[i] += dw[i]
                gb[i] += db[i]
            dirichlet_val, grads_i = _dirichlet_loss(params, ix, cfg)
            for i in range(len(gw)):
                gw[i] += grads_i[0][i]
                gb[i] += grads_i[1][i]
            adam_step(params, (gw, gb), state, context="guidance single-stage")
            if step % 10 == 0:
                curves["single"].append({"step": step, **terms_s,
                                         "align": float(cfg.w_align * a_vals.mean()),
                                         "smooth_omega": dirichlet_val})
    else:
        for step in range(cfg.epochs_warmup * cfg.steps_per_epoch):
            sb = surf_batch(pick(len(surf_x), cfg.batch))
            bx = bottom[pick(len(bottom), cfg.batch // 2)] if len(bottom) else bottom
            loss, grads, terms = warmup_loss(params, sb, bx, cfg)
            adam_step(params, grads, state, context="guidance warm-up")
            if step % 10 == 0:
                curves["warmup"].append({"step": step, "loss": loss, **terms})

        for step in range(cfg.epochs_surface * cfg.steps_per_epoch):
            sb = surf_batch(pick(len(surf_x), cfg.batch))
            bx = bottom[pick(len(bottom), cfg.batch // 2)] if len(bottom) else bottom
            loss, grads, terms = surface_stage_loss(params, sb, bx, cfg)
            adam_step(params, grads, state, context="guidance surface stage")
            if step % 10 == 0:
                curves["surface"].append({"step": step, "loss": loss, **terms})

        v_frozen, _ = surface_tangents(params, sdf_params, surf_x)
        surf_all.v_frozen = v_frozen

        for step in range(cfg.epochs_interior * cfg.steps_per_epoch):
            sb = surf_batch(pick(len(surf_x), cfg.batch))
            ix = interior[pick(len(interior), cfg.batch)]
            loss, grads, terms = interior_stage_loss(params, ix, sb, cfg)
            adam_step(params, grads, state, context="guidance interior stage")
            if step % 10 == 0:
                curves["interior"].append({"step": step, "loss": loss, **terms})

    # normalize to [0,1] over the model (surface + interior samples)
    probes = np.vstack([surf_x, interior]) if len(interior) else surf_x
    params, value_range = normalize_field(params, probes)

    v_t, v_norms = surface_tangents(params, sdf_params, surf_x)
    clusters = singularity_census(v_norms, surf_x)
    m = np.abs(np.einsum("nd,nd->n", v_t / np.maximum(v_norms, 1e-12)[:, None],
                         surf_all.normal_unit))
    # v_T is tangent by construction; the support-free census uses grad g
    _, gg, _ = forward(params, surf_x, order=1)
    ghat, _ = _unit_rows(gg[:, 0, :])
    viol = np.abs(np.einsum("nd,nd->n", ghat, surf_all.normal_unit)) \
        > np.sin(np.radians(cfg.alpha_deg))
    report = {
        "curves": curves,
        "singularities": clusters,
        "n_singularities": len(clusters),
        "sf_violation_fraction": float(viol.mean()),
        "value_range": value_range,
    }
    result = GuidanceResult(params=params, value_range=value_range, report=report)
    if not single_stage:
        # frozen tangents are stored pre-normalization; rescale to match
        span = value_range[1] - value_range[0]
        result.v_frozen_points = surf_x
        result.v_frozen = surf_all.v_frozen / span
    return result
