"""Procedural analytic fixtures: point clouds with exact signed distances.

Each fixture yields a ModelCloud (surface samples + outward normals, already
in normalized coordinates) and an AnalyticField holding the exact signed
distance, which the tests use as an independent oracle. Fixtures are
generated procedurally, never shipped as data blobs.
"""

from __future__ import annotations

import numpy as np

from .fields import AnalyticField
from .geometry import ModelCloud

Array = np.ndarray


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Signed distance primitives (exact, vectorized over (N, 3))


def sd_sphere(x, r):
    return np.linalg.norm(x, axis=1) - r


def sd_torus(x, big_r, small_r):
    q = np.stack([np.hypot(x[:, 0], x[:, 1]) - big_r, x[:, 2]], axis=1)
    return np.linalg.norm(q, axis=1) - small_r


def sd_box(x, half):
    q = np.abs(x) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def sd_capped_cylinder(x, r, half_h):
    d = np.stack([np.hypot(x[:, 0], x[:, 1]) - r, np.abs(x[:, 2]) - half_h], axis=1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


def sd_capsule(x, a, b, r):
    a = np.asarray(a, dtype=float)
    ab = np.asarray(b, dtype=float) - a
    t = np.clip((x - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(x - (a + t[:, None] * ab), axis=1) - r


# ---------------------------------------------------------------------------
# Surface samplers (uniform by area on each primitive)


def _sample_sphere(rng, n, r):
    d = _unit(rng.normal(size=(n, 3)))
    return r * d, d


def _sample_torus(rng, n, big_r, small_r):
    pts = np.empty((0, 3))
    nrm = np.empty((0, 3))
    while len(pts) < n:
        m = 2 * (n - len(pts)) + 64
        phi = rng.uniform(0, 2 * np.pi, m)
        theta = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1, m) < (big_r + small_r * np.cos(theta)) / (big_r + small_r)
        phi, theta = phi[keep], theta[keep]
        cx = np.cos(phi) * (big_r + small_r * np.cos(theta))
        cy = np.sin(phi) * (big_r + small_r * np.cos(theta))
        cz = small_r * np.sin(theta)
        nx = np.cos(phi) * np.cos(theta)
        ny = np.sin(phi) * np.cos(theta)
        nz = np.sin(theta)
        pts = np.vstack([pts, np.stack([cx, cy, cz], axis=1)])
        nrm = np.vstack([nrm, np.stack([nx, ny, nz], axis=1)])
    return pts[:n], nrm[:n]


def _sample_box(rng, n, half):
    half = np.asarray(half, dtype=float)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 2
    probs = np.repeat(areas, 2)
    probs = probs / probs.sum()
    face = rng.choice(6, size=n, p=probs)
    u = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign == 0 else -1.0
        m = face == f
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = u[m, 0] * half[others[0]]
        pts[m, others[1]] = u[m, 1] * half[others[1]]
        nrm[m, axis] = sign
    return pts, nrm


def _sample_capped_cylinder(rng, n, r, half_h):
    lat_area = 2 * np.pi * r * 2 * half_h
    cap_area = np.pi * r * r
    probs = np.array([lat_area, cap_area, cap_area])
    probs = probs / probs.sum()
    part = rng.choice(3, size=n, p=probs)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    th = rng.uniform(0, 2 * np.pi, n)
    m = part == 0
    pts[m, 0] = r * np.cos(th[m])
    pts[m, 1] = r * np.sin(th[m])
    pts[m, 2] = rng.uniform(-half_h, half_h, m.sum())
    nrm[m, 0] = np.cos(th[m])
    nrm[m, 1] = np.sin(th[m])
    for sign, pid in ((1.0, 1), (-1.0, 2)):
        m = part == pid
        rad = r * np.sqrt(rng.uniform(0, 1, m.sum()))
        pts[m, 0] = rad * np.cos(th[m])
        pts[m, 1] = rad * np.sin(th[m])
        pts[m, 2] = sign * half_h
        nrm[m, 2] = sign
    return pts, nrm


def _sample_capsule(rng, n, a, b, r):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    # orthonormal frame around the axis
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(np.cross(axis, ref)[None])[0]
    e2 = np.cross(axis, e1)
    lat_area = 2 * np.pi * r * length
    cap_area = 2 * np.pi * r * r
    probs = np.array([lat_area, cap_area, cap_area])
    probs = probs / probs.sum()
    part = rng.choice(3, size=n, p=probs)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    th = rng.uniform(0, 2 * np.pi, n)
    m = part == 0
    t = rng.uniform(0, 1, m.sum())
    radial = np.cos(th[m])[:, None] * e1 + np.sin(th[m])[:, None] * e2
    pts[m] = a + t[:, None] * (length * axis) + r * radial
    nrm[m] = radial
    for center, sign, pid in ((a, -1.0, 1), (b, 1.0, 2)):
        m = part == pid
        d = _unit(rng.normal(size=(m.sum(), 3)))
        d[(d @ axis) * sign < 0] *= -1
        pts[m] = center + r * d
        nrm[m] = d
    return pts, nrm


# ---------------------------------------------------------------------------
# Fixture construction


def _analytic(fn, h=1e-6):
    return AnalyticField(fn, h=h)


def _union_cloud(rng, n, parts, phi):
    """Sample each primitive by weight, reject points buried inside the union."""
    pts = np.empty((0, 3))
    nrm = np.empty((0, 3))
    weights = np.array([w for w, _ in parts], dtype=float)
    weights = weights / weights.sum()
    while len(pts) < n:
        m = int((n - len(pts)) * 1.6) + 64
        counts = rng.multinomial(m, weights)
        for c, (_, sampler) in zip(counts, parts):
            if c == 0:
                continue
            p, nv = sampler(c)
            keep = phi(p) > -1e-6
            pts = np.vstack([pts, p[keep]])
            nrm = np.vstack([nrm, nv[keep]])
    return pts[:n], nrm[:n]


def make_sphere(n=10000, seed=0, radius=0.8, scale_mm=100.0):
    rng = np.random.default_rng(seed)
    pts, nrm = _sample_sphere(rng, n, radius)
    cloud = ModelCloud(pts, nrm, scale_mm, np.full(3, 2 * radius * scale_mm))
    return cloud, _analytic(lambda x: sd_sphere(x, radius))


def make_torus(n=10000, seed=0, big_r=0.5, small_r=0.2, scale_mm=100.0):
    rng = np.random.default_rng(seed)
    pts, nrm = _sample_torus(rng, n, big_r, small_r)
    bbox = np.array([2 * (big_r + small_r), 2 * (big_r + small_r), 2 * small_r]) * scale_mm
    cloud = ModelCloud(pts, nrm, scale_mm, bbox)
    return cloud, _analytic(lambda x: sd_torus(x, big_r, small_r))


def make_slab(n=10000, seed=0, half=(0.6, 0.5, 0.15), scale_mm=100.0):
    rng = np.random.default_rng(seed)
    pts, nrm = _sample_box(rng, n, half)
    cloud = ModelCloud(pts, nrm, scale_mm, 2 * np.asarray(half) * scale_mm)
    return cloud, _analytic(lambda x: sd_box(x, half))


def make_cylinder(n=10000, seed=0, radius=0.25, half_h=0.6, scale_mm=100.0):
    rng = np.random.default_rng(seed)
    pts, nrm = _sample_capped_cylinder(rng, n, radius, half_h)
    bbox = np.array([2 * radius, 2 * radius, 2 * half_h]) * scale_mm
    cloud = ModelCloud(pts, nrm, scale_mm, bbox)
    return cloud, _analytic(lambda x: sd_capped_cylinder(x, radius, half_h))


def make_ybranch(n=12000, seed=0, scale_mm=100.0):
    """Trunk splitting into two tilted arms: one merge/split event in g."""
    trunk = ((0.0, 0.0, -0.75), (0.0, 0.0, -0.10), 0.18)
    arm1 = ((0.0, 0.0, -0.10), (0.42, 0.0, 0.62), 0.14)
    arm2 = ((0.0, 0.0, -0.10), (-0.42, 0.0, 0.62), 0.14)
    caps = [trunk, arm1, arm2]

    def phi(x):
        return np.minimum.reduce([sd_capsule(x, a, b, r) for a, b, r in caps])

    rng = np.random.default_rng(seed)
    parts = [
        (0.8, lambda c, ab=cap: _sample_capsule(rng, c, ab[0], ab[1], ab[2]))
        for cap in caps
    ]
    pts, nrm = _union_cloud(rng, n, parts, phi)
    bbox = np.array([1.12, 0.36, 1.51]) * scale_mm
    cloud = ModelCloud(pts, nrm, scale_mm, bbox)
    return cloud, _analytic(phi)


def make_twobranch(n=14000, seed=0, branch_x=0.3, branch_r=0.12, top=0.55,
                   scale_mm=100.0):
    """Adversarial fixture: base plate with two tall parallel branches.

    Sized so that printing one branch to full height before its sibling puts
    the collar of a typical extruder inside the sibling's material.
    """
    base_half = (0.52, 0.2, 0.1)
    base_c = np.array([0.0, 0.0, -0.62])
    b1 = ((branch_x, 0.0, -0.55), (branch_x, 0.0, top), branch_r)
    b2 = ((-branch_x, 0.0, -0.55), (-branch_x, 0.0, top), branch_r)

    def phi(x):
        return np.minimum.reduce([
            sd_box(x - base_c, base_half),
            sd_capsule(x, b1[0], b1[1], b1[2]),
            sd_capsule(x, b2[0], b2[1], b2[2]),
        ])

    rng = np.random.default_rng(seed)
    parts = [
        (1.0, lambda c: tuple(arr for arr in _sample_box(rng, c, base_half))),
        (1.2, lambda c: _sample_capsule(rng, c, b1[0], b1[1], b1[2])),
        (1.2, lambda c: _sample_capsule(rng, c, b2[0], b2[1], b2[2])),
    ]

    def sample_base(c):
        p, nv = _sample_box(rng, c, base_half)
        return p + base_c, nv

    parts[0] = (1.0, sample_base)
    pts, nrm = _union_cloud(rng, n, parts, phi)
    bbox = np.array([1.04, 0.4, (top + branch_r) - (-0.72)]) * scale_mm
    cloud = ModelCloud(pts, nrm, scale_mm, bbox)
    return cloud, _analytic(phi)


FIXTURES = {
    "sphere": make_sphere,
    "torus": make_torus,
    "slab": make_slab,
    "cylinder": make_cylinder,
    "ybranch": make_ybranch,
    "twobranch": make_twobranch,
}


def make_fixture(name: str, n: int | None = None, seed: int = 0, **kwargs):
    """Build a fixture by name; returns (ModelCloud, AnalyticField SDF)."""
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture '{name}' (have {sorted(FIXTURES)})")
    fn = FIXTURES[name]
    if n is not None:
        return fn(n=n, seed=seed, **kwargs)
    return fn(seed=seed, **kwargs)
