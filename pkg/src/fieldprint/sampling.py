"""Stratified training samples over the normalized model domain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fields import FieldParams, forward
from .geometry import ModelCloud, surface_variation

logger = logging.getLogger(__name__)

Array = np.ndarray

DEFAULT_COUNTS = {"surface": 10000, "interior": 10000, "offsurface": 10000, "bottom": 2000}


@dataclass
class SampleSet:
    """Training strata: surface (with normals/weights), interior, off-surface, bottom."""

    surface_points: Array
    surface_normals: Array
    surface_weights: Array
    interior: Array = field(default_factory=lambda: np.empty((0, 3)))
    offsurface: Array = field(default_factory=lambda: np.empty((0, 3)))
    bottom: Array = field(default_factory=lambda: np.empty((0, 3)))

    def __post_init__(self):
        w = self.surface_weights
        if len(w) and (w.min() <= 0 or abs(w.sum() - 1.0) > 1e-9):
            raise ValueError("surface weights must be positive and normalized")


def _weighted_pick(rng, n_pick, weights):
    """Deterministic weighted sampling without replacement (exp-key trick)."""
    keys = rng.uniform(size=len(weights)) ** (1.0 / weights)
    order = np.argsort(-keys)
    return order[:n_pick]


def stratified_samples(
    cloud: ModelCloud,
    sdf: FieldParams | None = None,
    counts: dict | None = None,
    h_bottom: float = 0.05,
    kappa_weight: float = 4.0,
    seed: int = 0,
    feature_weighted: bool = False,
) -> SampleSet:
    """Draw the training strata.

    Surface samples are cloud points picked with probability proportional to
    ``1 + kappa_weight * curvature`` (PCA surface-variation estimate), with
    importance weights that keep weighted means unbiased. Interior points are
    rejection-sampled from ``phi < 0`` and require a trained SDF; with
    ``feature_weighted`` their density additionally increases where the local
    feature size is small. The bottom stratum is the slab of height
    ``h_bottom`` above the lowest model point.
    """
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    if any(v < 0 for v in counts.values()):
        raise ValueError("stratum counts must be non-negative")
    rng = np.random.default_rng(seed)

    # --- surface stratum
    n_surf = min(counts["surface"], len(cloud.points))
    curv = surface_variation(cloud.points)
    cmax = curv.max()
    rel = curv / cmax if cmax > 0 else np.zeros_like(curv)
    prob = 1.0 + kappa_weight * rel
    idx = _weighted_pick(rng, n_surf, prob)
    idx.sort()
    w = 1.0 / prob[idx]
    w = w / w.sum()
    surface_points = cloud.points[idx]
    surface_normals = cloud.normals[idx]

    # --- off-surface stratum: uniform over the cube
    offsurface = rng.uniform(-1, 1, size=(counts["offsurface"], 3))

    # --- interior stratum (needs the SDF)
    interior = np.empty((0, 3))
    if sdf is not None and counts["interior"] > 0:
        pool_target = counts["interior"] * (2 if feature_weighted else 1)
        accepted = []
        tried = kept = 0
        while sum(len(a) for a in accepted) < pool_target:
            cand = rng.uniform(-1, 1, size=(max(pool_target, 4096) * 2, 3))
            v, _, _ = forward(sdf, cand)
            inside = cand[v[:, 0] < 0]
            tried += len(cand)
            kept += len(inside)
            accepted.append(inside)
            if tried >= 4096 and kept / tried < 0.01:
                raise RuntimeError(
                    "interior rejection sampling acceptance below 1%: "
                    "SDF looks untrained or sign-flipped"
                )
        pool = np.vstack(accepted)[:pool_target]
        if feature_weighted and len(pool) > counts["interior"]:
            from .sdf import feature_size  # deferred: sdf layers on top of sampling

            fs = feature_size(sdf, pool)
            wt = 1.0 / (fs + 0.05)
            pick = _weighted_pick(rng, counts["interior"], wt)
            pick.sort()
            interior = pool[pick]
        else:
            interior = pool[: counts["interior"]]

    # --- bottom stratum: slab above the lowest point, within interior/surface
    z_cut = cloud.points[:, 2].min() + h_bottom
    pool_parts = [surface_points[surface_points[:, 2] < z_cut]]
    if len(interior):
        pool_parts.append(interior[interior[:, 2] < z_cut])
    bottom_pool = np.vstack(pool_parts)
    if len(bottom_pool) > counts["bottom"]:
        pick = rng.choice(len(bottom_pool), size=counts["bottom"], replace=False)
        pick.sort()
        bottom_pool = bottom_pool[pick]
    if len(bottom_pool) == 0 and counts["bottom"] > 0:
        logger.warning("bottom stratum is empty (h_bottom=%.3g)", h_bottom)

    return SampleSet(
        surface_points=surface_points,
        surface_normals=surface_normals,
        surface_weights=w,
        interior=interior,
        offsurface=offsurface,
        bottom=bottom_pool,
    )
