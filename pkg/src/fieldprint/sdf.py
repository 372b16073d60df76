"""Signed distance field training and derived surface geometry.

The SDF is fit to a normalized point cloud with a five-term loss: surface
distance, surface normal alignment, an off-surface exponential penalty that
suppresses spurious zero crossings, an eikonal term enforcing unit gradient,
and a Laplacian term that removes interior ghost geometry. Principal
curvature directions and a local feature-size estimate are computed from the
trained field's analytic derivatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .fields import (
    AdamState,
    FieldParams,
    NumericError,
    ScalarField,
    SirenField,
    adam_step,
    backward,
    forward,
    siren_init,
)
from .geometry import ModelCloud
from .sampling import SampleSet, stratified_samples

logger = logging.getLogger(__name__)

Array = np.ndarray


class TrainingError(RuntimeError):
    """Raised when a training stage fails its convergence postcondition."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


@dataclass
class SdfLossWeights:
    w_dist: float = 3000.0
    w_norm: float = 100.0
    w_nm: float = 100.0
    w_eikonal: float = 50.0
    w_lap: float = 10.0
    gamma: float = 60.0
    # raw <grad phi, n> rewards unbounded gradient growth along the normal
    # unless the eikonal term dominates pointwise; the normalized (cosine)
    # form is stable for any weight ratio and is the default.
    norm_cosine: bool = True
    # off-surface samples closer than this band (by current |phi|) are
    # excluded from the repulsion term so it cannot distort the surface fit
    nm_band: float = 0.02

    def validate(self):
        vals = [self.w_dist, self.w_norm, self.w_nm, self.w_eikonal, self.w_lap]
        if any(v <= 0 for v in vals):
            raise ValueError("loss weights must be positive")
        if self.gamma < 10:
            raise ValueError("gamma must be >= 10")


@dataclass
class SdfTrainConfig:
    hidden: int = 64
    layers: int = 5
    omega0: float = 30.0
    lr: float = 1e-4
    lr_floor_frac: float = 0.1
    steps: int = 4000
    min_steps: int = 500
    batch_surface: int = 2048
    batch_cube: int = 2048
    lap_frac: float = 0.25
    lap_anneal_frac: float = 0.4
    target_surface_err: float = 2.0e-4
    eval_every: int = 250
    # supervised far-field anchor: the implicit terms alone grow the far
    # field too slowly at desk scale, so the field is additionally fit to
    # signed nearest-cloud distances outside a safety band
    w_far: float = 100.0
    far_band: float = 0.1
    far_pool: int = 40000
    far_batch: int = 1024
    seed: int = 0
    weights: SdfLossWeights = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = SdfLossWeights()


def _term_guard(name, value):
    if not np.isfinite(value):
        raise NumericError(f"non-finite value in SDF loss term '{name}'")
    return value


def sdf_loss(params: FieldParams, samples: SampleSet, weights: SdfLossWeights,
             lap_points: Array | None = None, max_chunk: int = 4096):
    """Monte-Carlo SDF loss and its parameter gradient.

    Surface terms use the stratum's importance weights; the non-manifold term
    runs on the off-surface stratum; eikonal runs on the off-surface stratum
    (a uniform cube sample); the Laplacian term runs on ``lap_points``
    (defaults to the off-surface stratum, where second-order evaluation is
    affordable on a subsample).

    Returns (loss, (grad_w, grad_b), terms-dict).
    """
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    terms = {"dist": 0.0, "norm": 0.0, "nm": 0.0, "eikonal": 0.0, "lap": 0.0}

    def accumulate(grads):
        for i in range(len(gw)):
            gw[i] += grads[0][i]
            gb[i] += grads[1][i]

    # Surface: distance + normal alignment + eikonal contribution (order 1)
    pts, nrm, w = samples.surface_points, samples.surface_normals, samples.surface_weights
    eik_surf_share = 0.5 if len(samples.offsurface) else 1.0
    eik_cube_share = 0.5 if len(pts) else 1.0
    for s in range(0, len(pts), max_chunk):
        x, n, ww = pts[s:s + max_chunk], nrm[s:s + max_chunk], w[s:s + max_chunk]
        v, g, _, cache = forward(params, x, order=1, want_cache=True)
        grad = g[:, 0, :]
        gn = np.linalg.norm(grad, axis=1)
        terms["dist"] += weights.w_dist * float(ww @ np.abs(v[:, 0]))
        cv = (weights.w_dist * ww * np.sign(v[:, 0]))[:, None]
        if weights.norm_cosine:
            ghat = grad / np.maximum(gn, 1e-12)[:, None]
            dots = np.einsum("nd,nd->n", ghat, n)
            terms["norm"] += weights.w_norm * float(ww @ (1.0 - dots))
            cg = (-weights.w_norm * ww[:, None] * (n - dots[:, None] * ghat)
                  / np.maximum(gn, 1e-12)[:, None])
        else:
            terms["norm"] += weights.w_norm * float(
                ww @ (1.0 - np.einsum("nd,nd->n", grad, n)))
            cg = -weights.w_norm * ww[:, None] * n
        # eikonal on the surface stratum keeps the field metric where the
        # distance term lives (the surface is part of the whole-cube domain);
        # surface and cube halves average to one whole-domain mean
        terms["eikonal"] += eik_surf_share * weights.w_eikonal * float(ww @ np.abs(gn - 1.0))
        unit = grad / np.maximum(gn, 1e-12)[:, None]
        cg = cg + eik_surf_share * weights.w_eikonal * (ww * np.sign(gn - 1.0))[:, None] * unit
        accumulate(backward(params, cache, cv, cg[:, None, :]))

    # Off-surface: non-manifold penalty + eikonal (order 1)
    off = samples.offsurface
    n_off = max(len(off), 1)
    for s in range(0, len(off), max_chunk):
        x = off[s:s + max_chunk]
        v, g, _, cache = forward(params, x, order=1, want_cache=True)
        absv = np.abs(v[:, 0])
        e = np.exp(-weights.gamma * absv)
        e = np.where(absv >= weights.nm_band, e, 0.0)
        terms["nm"] += weights.w_nm * float(e.sum()) / n_off
        gn = np.linalg.norm(g[:, 0, :], axis=1)
        terms["eikonal"] += eik_cube_share * weights.w_eikonal * float(np.abs(gn - 1.0).sum()) / n_off
        cv = (-weights.w_nm * weights.gamma * np.sign(v[:, 0]) * e / n_off)[:, None]
        unit = g[:, 0, :] / np.maximum(gn, 1e-12)[:, None]
        cg = (eik_cube_share * weights.w_eikonal * np.sign(gn - 1.0)[:, None]
              * unit / n_off)[:, None, :]
        accumulate(backward(params, cache, cv, cg))

    # Laplacian over the cube (order 2, subsample)
    lap = samples.offsurface if lap_points is None else lap_points
    n_lap = max(len(lap), 1)
    for s in range(0, len(lap), max_chunk):
        x = lap[s:s + max_chunk]
        _, _, h, cache = forward(params, x, order=2, want_cache=True)
        tr = np.trace(h[:, 0], axis1=1, axis2=2)
        terms["lap"] += weights.w_lap * float((tr ** 2).sum()) / n_lap
        ch = (2.0 * weights.w_lap / n_lap) * tr[:, None, None] * np.eye(3)
        accumulate(backward(params, cache, None, None, ch[:, None]))

    for name, value in terms.items():
        _term_guard(name, value)
    return sum(terms.values()), (gw, gb), terms


def surface_error(params: FieldParams, points: Array) -> float:
    """Mean |phi| over the given surface points."""
    v, _, _ = forward(params, points)
    return float(np.abs(v[:, 0]).mean())


def eikonal_residual(params: FieldParams, n: int = 20000, seed: int = 7) -> float:
    """Mean | ||grad phi|| - 1 | over fresh uniform cube points."""
    x = np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))
    _, g, _ = forward(params, x, order=1)
    return float(np.abs(np.linalg.norm(g[:, 0, :], axis=1) - 1.0).mean())


def signed_cloud_distance(points: Array, normals: Array, x: Array) -> Array:
    """Nearest-cloud-point distance, signed by the local normal.

    Exact up to cloud spacing away from the medial axis; used only to seed
    the field before the implicit losses take over.
    """
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    d, idx = tree.query(x)
    side = np.einsum("nd,nd->n", x - points[idx], normals[idx])
    return np.where(side >= 0, d, -d)


def _far_field_pool(cloud, cfg, rng):
    """Cube samples with reliable signed nearest-point distances.

    Points within ``far_band`` of the cloud are excluded: there the surface
    terms own the fit and nearest-point distances carry sampling bias.
    """
    pool = rng.uniform(-1, 1, size=(cfg.far_pool, 3))
    target = signed_cloud_distance(cloud.points, cloud.normals, pool)
    keep = np.abs(target) >= cfg.far_band
    return pool[keep], target[keep]


def train_sdf(cloud: ModelCloud, config: SdfTrainConfig | None = None,
              samples: SampleSet | None = None):
    """Fit the signed distance field to a model cloud.

    Returns ``(params, report)``; the report carries per-term loss curves,
    the held-out surface error and the cube eikonal residual. Raises
    TrainingError when the surface error stays above 10x target.
    """
    cfg = config or SdfTrainConfig()
    cfg.weights.validate()
    rng = np.random.default_rng(cfg.seed)
    if samples is None:
        samples = stratified_samples(
            cloud, None,
            counts={"surface": len(cloud.points), "interior": 0,
                    "offsurface": 0, "bottom": 0},
            seed=cfg.seed,
        )

    n = len(samples.surface_points)
    n_hold = max(min(n // 10, 2000), 1)
    hold = rng.choice(n, size=n_hold, replace=False)
    train_mask = np.ones(n, bool)
    train_mask[hold] = False
    surf_pts = samples.surface_points[train_mask]
    surf_nrm = samples.surface_normals[train_mask]
    surf_w = samples.surface_weights[train_mask]
    hold_pts = samples.surface_points[hold]

    sizes = (3,) + (cfg.hidden,) * (cfg.layers - 1) + (1,)
    params = siren_init(sizes, omega0=cfg.omega0, rng=cfg.seed)
    far_pool, far_target = (np.empty((0, 3)), np.empty(0))
    if cfg.w_far > 0:
        far_pool, far_target = _far_field_pool(cloud, cfg, rng)
    state = AdamState.for_params(params, lr=cfg.lr)
    curves = []
    held_err = np.inf

    for step in range(cfg.steps):
        pick = rng.choice(len(surf_pts), size=min(cfg.batch_surface, len(surf_pts)),
                          replace=False)
        bw = surf_w[pick]
        batch = SampleSet(
            surface_points=surf_pts[pick],
            surface_normals=surf_nrm[pick],
            surface_weights=bw / bw.sum(),
            offsurface=rng.uniform(-1, 1, size=(cfg.batch_cube, 3)),
        )
        n_lap = max(int(cfg.lap_frac * cfg.batch_cube), 1)
        # the Laplacian term suppresses early ghost geometry but biases the
        # final fit (a true SDF has nonzero Laplacian), so it decays to zero
        # across the first lap_anneal_frac of the run
        anneal_len = max(cfg.lap_anneal_frac * cfg.steps, 1.0)
        lap_scale = max(0.0, 1.0 - step / anneal_len)
        weights = replace(cfg.weights,
                          w_lap=max(cfg.weights.w_lap * lap_scale, 1e-12))
        loss, grads, terms = sdf_loss(params, batch, weights,
                                      lap_points=batch.offsurface[:n_lap])
        if len(far_pool):
            fp = rng.choice(len(far_pool), size=min(cfg.far_batch, len(far_pool)),
                            replace=False)
            v, _, _, cache = forward(params, far_pool[fp], order=0, want_cache=True)
            err = v[:, 0] - far_target[fp]
            terms["far"] = cfg.w_far * float((err ** 2).mean())
            loss += terms["far"]
            dw, db = backward(params, cache,
                              (2.0 * cfg.w_far * err / len(fp))[:, None])
            for i in range(len(grads[0])):
                grads[0][i] += dw[i]
                grads[1][i] += db[i]
        # cosine decay to a floor keeps late training stable near the target
        state.lr = cfg.lr * (cfg.lr_floor_frac + (1 - cfg.lr_floor_frac)
                             * 0.5 * (1 + np.cos(np.pi * step / cfg.steps)))
        adam_step(params, grads, state, context="sdf loss")
        if step % 25 == 0 or step == cfg.steps - 1:
            curves.append({"step": step, "loss": loss, **terms})
        if (step + 1) % cfg.eval_every == 0 and step + 1 >= cfg.min_steps:
            held_err = surface_error(params, hold_pts)
            eik_quick = eikonal_residual(params, n=4000)
            far_rmse = 0.0
            if len(far_pool):
                vq, _, _ = forward(params, far_pool[:4000])
                far_rmse = float(np.sqrt(
                    ((vq[:, 0] - far_target[:4000]) ** 2).mean()))
            curves[-1]["held_surface_err"] = held_err
            curves[-1]["eikonal_quick"] = eik_quick
            logger.info("sdf step %d held-out |phi| %.3e eik %.3f far %.3f",
                        step + 1, held_err, eik_quick, far_rmse)
            if (held_err < cfg.target_surface_err and eik_quick < 0.02
                    and far_rmse < 0.02):
                break

    held_err = surface_error(params, hold_pts)
    eik = eikonal_residual(params)
    report = {
        "curves": curves,
        "held_surface_err": held_err,
        "eikonal_residual": eik,
        "steps_run": state.step,
        "converged": bool(held_err < 10 * cfg.target_surface_err),
    }
    if not report["converged"]:
        raise TrainingError(
            f"SDF training failed: held-out surface error {held_err:.3e} "
            f"exceeds 10x target {cfg.target_surface_err:.1e}", report)
    return params, report


# ---------------------------------------------------------------------------
# Derived geometry


def _as_field(sdf) -> ScalarField:
    return SirenField(sdf) if isinstance(sdf, FieldParams) else sdf


def curvature_dirs(sdf, x: Array, band: float = 5e-3):
    """Principal curvature directions/values of the zero level set at ``x``.

    Eigen-decomposition of the tangent-projected Hessian divided by the
    gradient norm (shape operator of the level set). Returns
    ``(d_min, d_max, k_min, k_max, umbilic)`` with unit, mutually orthogonal
    directions both orthogonal to the normal. Points must lie in the surface
    band ``|phi| < band``.
    """
    field = _as_field(sdf)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = field.values(x)
    if np.abs(v).max() >= band:
        raise ValueError(f"curvature query off the surface band (|phi| >= {band})")
    g = field.gradients(x)
    h = field.hessians(x)
    gn = np.linalg.norm(g, axis=1)
    nhat = g / gn[:, None]
    eye = np.eye(3)
    proj = eye[None] - nhat[:, :, None] * nhat[:, None, :]
    shape_op = np.matmul(np.matmul(proj, h), proj) / gn[:, None, None]
    vals, vecs = np.linalg.eigh(shape_op)
    # Drop the eigenvector most parallel to the normal (eigenvalue ~ 0 slot).
    align = np.abs(np.einsum("nd,ndk->nk", nhat, vecs))
    drop = align.argmax(axis=1)
    n_pts = len(x)
    keep = np.array([[k for k in range(3) if k != drop[i]] for i in range(n_pts)])
    rows = np.arange(n_pts)[:, None]
    kv = vals[rows, keep]
    kd = vecs[rows[:, :, None], np.arange(3)[None, None, :], keep[:, :, None]]
    order = np.argsort(kv, axis=1)
    k_min = kv[rows[:, 0], order[:, 0]]
    k_max = kv[rows[:, 0], order[:, 1]]
    d_min = kd[rows[:, 0], order[:, 0]]
    d_max = kd[rows[:, 0], order[:, 1]]
    umbilic = np.abs(k_max - k_min) < 1e-6
    return d_min, d_max, k_min, k_max, umbilic


def feature_size(sdf, x: Array, step: float = 0.005, max_steps: int = 400,
                 chunk: int = 8192) -> Array:
    """Local slab thickness at interior points.

    Marches from each point along +/- the (frozen) gradient direction until
    the field turns non-negative, refines each crossing by bisection, and
    returns the summed distances. Rays that fail to bracket fall back to
    |phi| as a floor.
    """
    field = _as_field(sdf)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = _feature_size_block(field, x[s:s + chunk], step, max_steps)
    return out


def _feature_size_block(field, x, step, max_steps):
    v0 = field.values(x)
    if (v0 >= 0).any():
        raise ValueError("feature_size requires interior points (phi < 0)")
    g = field.gradients(x)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    d = np.where(gn > 1e-8, g / np.maximum(gn, 1e-12), np.array([0.0, 0.0, 1.0]))

    def march(direction):
        t = np.zeros(len(x))
        lo = np.zeros(len(x))
        hit = np.zeros(len(x), bool)
        active = np.ones(len(x), bool)
        for _ in range(max_steps):
            if not active.any():
                break
            t_new = t.copy()
            t_new[active] += step
            probe = x[active] + t_new[active, None] * direction[active]
            inside_cube = np.abs(probe).max(axis=1) <= 1.25
            v = field.values(probe)
            crossed = (v >= 0) & inside_cube
            idx = np.flatnonzero(active)
            lo[idx[crossed]] = t[idx[crossed]]
            hit[idx[crossed]] = True
            active[idx[crossed]] = False
            active[idx[~inside_cube]] = False
            t = np.where(active, t_new, t)
            t[idx[crossed]] = t_new[idx[crossed]]
        # bisection refine between lo (inside) and t (outside)
        a, b = lo.copy(), t.copy()
        for _ in range(30):
            mid = 0.5 * (a + b)
            vm = field.values(x + mid[:, None] * direction)
            inside = vm < 0
            a = np.where(hit & inside, mid, a)
            b = np.where(hit & ~inside, mid, b)
        return 0.5 * (a + b), hit

    t_plus, hit_p = march(d)
    t_minus, hit_m = march(-d)
    thickness = t_plus + t_minus
    ok = hit_p & hit_m
    return np.where(ok, thickness, np.abs(v0))
