"""Infill field training: density control, support-free coupling, patterns.

Each infill scalar field deposits interior curves where its iso-surfaces cut
the guidance layers. The gradient norm tracks a density target (constant or
driven by local feature size), the direction follows a reference frame that
is perpendicular to the guidance gradient by construction (rotated by the
pattern angle beta), and a sigmoid overhang penalty keeps the implied walls
printable. Cross, diamond and hexagonal patterns are sets of such fields at
fixed angular offsets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fields import AdamState, NumericError, adam_step, backward, forward, siren_init
from .guidance import normalize_field, sigmoid
from .sdf import feature_size

logger = logging.getLogger(__name__)

Array = np.ndarray

PATTERNS = {
    "cross": [0.0, 90.0],
    "diamond": [0.0, 45.0],
    "hex": [0.0, 60.0, 120.0],
}


@dataclass
class DensityMode:
    """Constant density, or feature-size-driven in [rho_min, rho_max]."""

    kind: str = "constant"
    c: float = 8.0
    rho_min: float = 4.0
    rho_max: float = 12.0
    lam: float = 0.1


def density_field(sdf, x: Array, mode: DensityMode) -> Array:
    """Target gradient-norm (lines per unit length) at interior points."""
    if mode.kind == "constant":
        return np.full(len(x), mode.c)
    if mode.kind == "feature":
        fs = feature_size(sdf, x)
        return mode.rho_min + (mode.rho_max - mode.rho_min) * np.exp(-fs / mode.lam)
    raise ValueError(f"unknown density mode '{mode.kind}'")


def infill_reference_dir(grad_g: Array, beta_deg: float, d_ref: Array) -> Array:
    """Pattern direction: perpendicular to grad g, rotated by beta around it.

    d = cos(beta) (g x r) + sin(beta) (g x (g x r)) with unit g; normalized.
    """
    grad_g = np.atleast_2d(grad_g)
    gn = np.linalg.norm(grad_g, axis=1)
    if gn.min(initial=np.inf) <= 1e-6:
        raise ValueError("guidance gradient vanished; cannot build reference direction")
    ghat = grad_g / gn[:, None]
    d_ref = np.asarray(d_ref, dtype=float)
    d_ref = d_ref / np.linalg.norm(d_ref)
    cosang = np.abs(ghat @ d_ref)
    if cosang.max(initial=0.0) > np.cos(np.radians(1.0)):
        raise ValueError("reference direction is (near-)parallel to grad g; "
                         "pick a different reference")
    c1 = np.cross(ghat, np.broadcast_to(d_ref, ghat.shape))
    c2 = np.cross(ghat, c1)
    b = np.radians(beta_deg)
    d = np.cos(b) * c1 + np.sin(b) * c2
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class InfillConfig:
    w_density: float = 1.0
    w_sf: float = 0.5
    w_smooth: float = 0.1
    w_ref: float = 1.0
    ref_anneal: float = 0.1      # w_ref multiplier after half the steps
    k_sf: float = 30.0
    alpha_deg: float = 40.0
    d_ref: tuple = (1.0, 0.0, 0.0)
    density: DensityMode = None
    steps: int = 600
    batch: int = 2048
    lr: float = 1e-4
    hidden: int = 48
    layers: int = 5
    omega0: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.density is None:
            self.density = DensityMode()

    def validate(self):
        if min(self.w_density, self.w_sf, self.w_smooth, self.w_ref) <= 0:
            raise ValueError("infill loss weights must be positive")


def _guard(name, value):
    if not np.isfinite(value):
        raise NumericError(f"non-finite value in infill loss term '{name}'")
    return value


def infill_loss(psi_params, x: Array, ghat: Array, rho: Array, d_int: Array,
                cfg: InfillConfig, w_ref: float):
    """Weighted density + smoothness + support-free + reference losses.

    ``ghat``/``rho``/``d_int`` are cached per-sample quantities (unit guidance
    gradient, density target, reference direction).
    """
    n = len(x)
    _, g, _, cache = forward(psi_params, x, order=1, want_cache=True)
    a = g[:, 0, :]
    an = np.linalg.norm(a, axis=1)
    ahat = a / np.maximum(an, 1e-12)[:, None]

    terms = {}
    cot = np.zeros_like(a)

    err = an - rho
    terms["density"] = _guard("density", cfg.w_density * float((err ** 2).mean()))
    cot += cfg.w_density * (2.0 * err)[:, None] * ahat / n

    terms["smooth"] = _guard("smooth", cfg.w_smooth * float((an ** 2).mean()))
    cot += cfg.w_smooth * 2.0 * a / n

    m = np.einsum("nd,nd->n", ahat, ghat)
    t = cfg.k_sf * (np.abs(m) - np.sin(np.radians(cfg.alpha_deg)))
    sig = sigmoid(t)
    terms["sf"] = _guard("sf", cfg.w_sf * float(sig.mean()))
    dsig = sig * (1 - sig) * cfg.k_sf * np.sign(m)
    cot += cfg.w_sf * (dsig[:, None] * (ghat - m[:, None] * ahat)
                       / np.maximum(an, 1e-12)[:, None]) / n

    r = np.einsum("nd,nd->n", ahat, d_int)
    terms["ref"] = _guard("ref", w_ref * float((1.0 - r).mean()))
    cot += -w_ref * (d_int - r[:, None] * ahat) / np.maximum(an, 1e-12)[:, None] / n

    grads = backward(psi_params, cache, None, cot[:, None, :])
    return sum(terms.values()), grads, terms


def train_infill(g_params, sdf_params, interior: Array, beta_deg: float,
                 cfg: InfillConfig):
    """Train one infill field; returns (params, value_range, report)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed + int(beta_deg))

    _, gg, _ = forward(g_params, interior, order=1)
    grad_g = gg[:, 0, :]
    gn = np.linalg.norm(grad_g, axis=1)
    usable = gn > 1e-6
    x_pool = interior[usable]
    ghat = grad_g[usable] / gn[usable][:, None]
    rho = density_field(sdf_params, x_pool, cfg.density)
    d_int = infill_reference_dir(grad_g[usable], beta_deg, np.asarray(cfg.d_ref))

    sizes = (3,) + (cfg.hidden,) * (cfg.layers - 1) + (1,)
    params = siren_init(sizes, omega0=cfg.omega0, rng=cfg.seed + 11 + int(beta_deg))
    state = AdamState.for_params(params, lr=cfg.lr)
    curves = []
    for step in range(cfg.steps):
        pick = rng.choice(len(x_pool), size=min(cfg.batch, len(x_pool)), replace=False)
        w_ref = cfg.w_ref if step < cfg.steps // 2 else cfg.w_ref * cfg.ref_anneal
        loss, grads, terms = infill_loss(params, x_pool[pick], ghat[pick],
                                         rho[pick], d_int[pick], cfg, w_ref)
        adam_step(params, grads, state, context=f"infill beta={beta_deg:g}")
        if step % 20 == 0 or step == cfg.steps - 1:
            curves.append({"step": step, "loss": loss, **terms})

    params, value_range = normalize_field(params, x_pool)
    span = value_range[1] - value_range[0]

    # post-training probes (gradient norms reported in raw field units)
    _, pg, _ = forward(params, x_pool, order=1)
    a = pg[:, 0, :] * span
    an = np.linalg.norm(a, axis=1)
    density_err = float(np.abs(an - rho).mean() / rho.mean())
    dots = np.abs(np.einsum("nd,nd->n", a / np.maximum(an, 1e-12)[:, None], ghat))
    sf_violation = float((dots > np.sin(np.radians(cfg.alpha_deg))).mean())
    report = {
        "beta_deg": beta_deg,
        "curves": curves,
        "density_rel_err": density_err,
        "sf_violation_fraction": sf_violation,
        "value_range": value_range,
    }
    return params, value_range, report


def train_infill_set(g_params, sdf_params, interior: Array, pattern: str,
                     cfg: InfillConfig | None = None):
    """Train the pattern's fields; returns (fields list, manifest dict).

    Fields are independent given (g, phi); the manifest records beta and the
    reference direction per field plus pairwise in-layer angles.
    """
    cfg = cfg or InfillConfig()
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern '{pattern}' (have {sorted(PATTERNS)})")
    betas = PATTERNS[pattern]
    results = []
    for beta in betas:
        params, value_range, report = train_infill(g_params, sdf_params, interior,
                                                   beta, cfg)
        if report["density_rel_err"] > 0.25:
            report["failure"] = (f"density error {report['density_rel_err']:.2f} "
                                 "out of tolerance")
            logger.error("infill field beta=%g: %s", beta, report["failure"])
        results.append({"params": params, "value_range": value_range,
                        "beta_deg": beta, "report": report})

    angles = pairwise_layer_angles(
        [r["params"] for r in results], g_params, interior)
    manifest = {
        "pattern": pattern,
        "betas": betas,
        "d_ref": list(cfg.d_ref),
        "pairwise_angles_deg": angles,
        "reports": [r["report"] for r in results],
    }
    return results, manifest


def pairwise_layer_angles(psi_params_list, g_params, x: Array) -> list:
    """In-layer angles between infill gradients, projected off the guidance axis.

    Returns a list of dicts with the per-pair median angle (mod 180 deg) and
    the fraction of probes within 5 degrees of that pair's nominal offset.
    """
    _, gg, _ = forward(g_params, x, order=1)
    ghat = gg[:, 0, :]
    ghat = ghat / np.maximum(np.linalg.norm(ghat, axis=1, keepdims=True), 1e-12)
    projs = []
    for p in psi_params_list:
        _, pg, _ = forward(p, x, order=1)
        a = pg[:, 0, :]
        a = a - np.einsum("nd,nd->n", a, ghat)[:, None] * ghat
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        projs.append(a)
    out = []
    for i in range(len(projs)):
        for j in range(i + 1, len(projs)):
            cosv = np.abs(np.einsum("nd,nd->n", projs[i], projs[j]))
            ang = np.degrees(np.arccos(np.clip(cosv, 0.0, 1.0)))
            out.append({"pair": (i, j), "median_deg": float(np.median(ang)),
                        "angles_deg": ang})
    return out
