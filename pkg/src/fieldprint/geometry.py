"""Input geometry: point-cloud ingestion, normalization, extruder model.

Models arrive as point clouds (mesh vertices, scans, or sampled parametric
surfaces) in millimeters and are rescaled into the normalized cube [-1,1]^3
where all fields are trained. The extruder (nozzle cone, collar, distal
joint) is approximated as a point cloud in the tool frame for collision
queries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

Array = np.ndarray

# Longest bbox half-extent maps to this normalized radius, leaving headroom
# for off-surface sampling inside the cube.
FIT_RADIUS = 0.8


@dataclass
class ModelCloud:
    """Normalized point cloud with outward unit normals.

    ``points`` live in [-1,1]^3; ``denormalize`` maps back to millimeters via
    ``p_mm = p * scale_mm_per_unit + center_mm``.
    """

    points: Array
    normals: Array
    scale_mm_per_unit: float
    bbox_mm: Array
    center_mm: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("empty point cloud")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length")
        if np.abs(self.points).max() > 1.0 + 1e-9:
            raise ValueError("normalized points must lie in [-1,1]^3")

    def denormalize(self, p: Array) -> Array:
        return np.asarray(p) * self.scale_mm_per_unit + self.center_mm

    def normalize_mm(self, p_mm: Array) -> Array:
        return (np.asarray(p_mm) - self.center_mm) / self.scale_mm_per_unit


def normalize_points(points_mm: Array, fit_radius: float = FIT_RADIUS):
    """Map mm coordinates into the unit cube; returns (points, scale, bbox, center)."""
    points_mm = np.asarray(points_mm, dtype=float)
    lo = points_mm.min(axis=0)
    hi = points_mm.max(axis=0)
    bbox = hi - lo
    if bbox.max() <= 0:
        raise ValueError("degenerate bounding box")
    center = 0.5 * (lo + hi)
    scale = bbox.max() / 2.0 / fit_radius
    return (points_mm - center) / scale, scale, bbox, center


def _dedupe(points: Array, normals: Array, tol: float = 1e-7):
    """Collapse points closer than ``tol`` in normalized coordinates."""
    key = np.round(points / tol).astype(np.int64)
    _, idx = np.unique(key, axis=0, return_index=True)
    idx.sort()
    return points[idx], normals[idx]


def estimate_normals(points: Array, k: int = 16) -> Array:
    """Local plane fit normals, oriented outward from the centroid.

    The orientation heuristic flips each normal to point away from the local
    neighborhood mean relative to the global centroid; adequate for the
    closed shapes handled here (the SDF training absorbs residual noise).
    """
    tree = cKDTree(points)
    _, nbr = tree.query(points, k=min(k, len(points)))
    normals = np.empty_like(points)
    centroid = points.mean(axis=0)
    for i in range(len(points)):
        q = points[nbr[i]]
        q = q - q.mean(axis=0)
        cov = q.T @ q
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]
        if np.dot(n, points[i] - centroid) < 0:
            n = -n
        normals[i] = n
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals


def surface_variation(points: Array, k: int = 16) -> Array:
    """PCA surface variation (lambda0 / sum lambda): a bootstrap curvature proxy."""
    tree = cKDTree(points)
    _, nbr = tree.query(points, k=min(k, len(points)))
    var = np.empty(len(points))
    for i in range(len(points)):
        q = points[nbr[i]]
        q = q - q.mean(axis=0)
        vals = np.linalg.eigvalsh(q.T @ q)
        total = vals.sum()
        var[i] = vals[0] / total if total > 0 else 0.0
    return var


def load_cloud(path, fmt: str | None = None, k_normals: int = 16) -> ModelCloud:
    """Read a point cloud file (mm units) and normalize it.

    Formats: ``xyz`` (ASCII ``x y z [nx ny nz]``), ``ply`` (vertex element,
    ASCII or binary little-endian), ``obj`` (``v`` lines, plus ``vn`` when
    present and parallel). Missing normals are estimated by plane fit.
    """
    path = str(path)
    if fmt is None:
        fmt = path.rsplit(".", 1)[-1].lower()
    if fmt == "xyz":
        pts_mm, normals = _read_xyz(path)
    elif fmt == "ply":
        pts_mm, normals = _read_ply(path)
    elif fmt in ("obj", "obj-vertices"):
        pts_mm, normals = _read_obj_vertices(path)
    else:
        raise ValueError(f"unsupported point cloud format: {fmt}")
    return cloud_from_mm(pts_mm, normals, k_normals=k_normals)


def cloud_from_mm(points_mm: Array, normals: Array | None = None,
                  k_normals: int = 16) -> ModelCloud:
    """Build a normalized ModelCloud from raw mm points (normals optional)."""
    points_mm = np.asarray(points_mm, dtype=float)
    if len(points_mm) < 1000:
        logger.warning("point cloud has only %d points (<1000)", len(points_mm))
    pts, scale, bbox, center = normalize_points(points_mm)
    if normals is None:
        normals = estimate_normals(pts, k=k_normals)
    else:
        normals = np.asarray(normals, dtype=float)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(lens > 0, lens, 1.0)
        missing = (lens[:, 0] == 0)
        if missing.any():
            est = estimate_normals(pts, k=k_normals)
            normals[missing] = est[missing]
    pts, normals = _dedupe(pts, normals)
    return ModelCloud(pts, normals, scale, bbox, center)


def _read_xyz(path):
    data = np.loadtxt(path, dtype=float, ndmin=2)
    if data.shape[1] >= 6:
        return data[:, :3], data[:, 3:6]
    return data[:, :3], None


def _read_obj_vertices(path):
    verts, vnorms = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(t) for t in line.split()[1:4]])
            elif line.startswith("vn "):
                vnorms.append([float(t) for t in line.split()[1:4]])
    verts = np.asarray(verts, dtype=float)
    normals = None
    if len(vnorms) == len(verts) and len(vnorms) > 0:
        normals = np.asarray(vnorms, dtype=float)
    return verts, normals


_PLY_TYPES = {
    "float": ("f4", float), "float32": ("f4", float),
    "double": ("f8", float), "float64": ("f8", float),
    "uchar": ("u1", int), "uint8": ("u1", int),
    "char": ("i1", int), "int8": ("i1", int),
    "short": ("i2", int), "ushort": ("u2", int),
    "int": ("i4", int), "int32": ("i4", int),
    "uint": ("u4", int), "uint32": ("u4", int),
}


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt_line = fh.readline().split()
        binary = fmt_line[1] == b"binary_little_endian"
        if not binary and fmt_line[1] != b"ascii":
            raise ValueError("only ascii / binary_little_endian PLY supported")
        elements = []  # (name, count, [(prop, dtype)])
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            tok = line.split()
            if tok[0] == b"end_header":
                break
            if tok[0] == b"comment":
                continue
            if tok[0] == b"element":
                elements.append([tok[1].decode(), int(tok[2]), []])
            elif tok[0] == b"property":
                if tok[1] == b"list":
                    elements[-1][2].append((tok[-1].decode(), "list", tok[2:4]))
                else:
                    elements[-1][2].append((tok[-1].decode(), _PLY_TYPES[tok[1].decode()][0]))
        verts = normals = None
        for name, count, props in elements:
            if name == "vertex":
                if any(p[1] == "list" for p in props):
                    raise ValueError("list properties on vertex element not supported")
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                if binary:
                    rec = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt)
                else:
                    rows = [fh.readline().split() for _ in range(count)]
                    rec = np.array(
                        [tuple(float(v) for v in row) for row in rows], dtype=dt
                    )
                verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
                if all(f in dt.names for f in ("nx", "ny", "nz")):
                    normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(float)
                break
            # skip other elements (faces etc.) — vertices are all we consume
            if binary:
                raise ValueError("vertex element must come first in binary PLY")
            for _ in range(count):
                fh.readline()
        if verts is None:
            raise ValueError("PLY file has no vertex element")
        return verts, normals


def save_xyz(path, cloud: ModelCloud):
    """Write the cloud back out in mm as ASCII xyz with normals."""
    pts = cloud.denormalize(cloud.points)
    np.savetxt(path, np.hstack([pts, cloud.normals]), fmt="%.9g")


# ---------------------------------------------------------------------------
# Extruder model


@dataclass
class ExtruderSpec:
    """Tool geometry in mm: nozzle cone + collar disk + distal joint cylinder.

    Tool frame: tip at the origin, tool axis along +z (the body extends in
    +z, away from the deposited material).
    """

    cone_half_angle_deg: float = 20.0
    nozzle_length_mm: float = 40.0
    collar_radius_mm: float = 25.0
    collar_length_mm: float = 20.0
    joint_radius_mm: float = 30.0
    joint_length_mm: float = 60.0

    def validate(self):
        vals = [self.cone_half_angle_deg, self.nozzle_length_mm, self.collar_radius_mm,
                self.collar_length_mm, self.joint_radius_mm, self.joint_length_mm]
        if any(v <= 0 for v in vals):
            raise ValueError("extruder dimensions must be positive")


@dataclass
class ExtruderModel:
    """Point-cloud surrogate of the printing head in the tool frame (mm)."""

    points: Array
    point_spacing_mm: float
    spec: ExtruderSpec | None = None

    def __post_init__(self):
        if len(self.points) < 100:
            raise ValueError("extruder cloud must carry at least 100 points")
        if np.linalg.norm(self.points, axis=1).min() > 1e-9:
            raise ValueError("extruder cloud must include the tip at the origin")


def _ring(radius, z, spacing):
    n = max(int(np.ceil(2 * np.pi * radius / spacing)), 3)
    th = 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(th), radius * np.sin(th), np.full(n, z)], axis=1)


def _disk(r_in, r_out, z, spacing):
    rows = []
    r = max(r_in, spacing * 0.5) if r_in > 0 else 0.0
    radii = np.arange(r, r_out + spacing * 0.5, spacing)
    for radius in radii:
        if radius <= 0:
            rows.append(np.array([[0.0, 0.0, z]]))
        else:
            rows.append(_ring(radius, z, spacing))
    return np.vstack(rows) if rows else np.empty((0, 3))


def _cone(half_angle_deg, length, spacing):
    t = np.tan(np.radians(half_angle_deg))
    zs = np.arange(0.0, length + spacing * 0.5, spacing)
    rows = [np.array([[0.0, 0.0, 0.0]])]
    for z in zs[1:]:
        rows.append(_ring(z * t, z, spacing))
    return np.vstack(rows)


def _tube(radius, z0, z1, spacing):
    zs = np.arange(z0, z1 + spacing * 0.5, spacing)
    return np.vstack([_ring(radius, z, spacing) for z in zs])


def build_extruder(spec: ExtruderSpec | None = None, spacing_mm: float = 3.0) -> ExtruderModel:
    """Sample the extruder surface at roughly ``spacing_mm`` resolution."""
    spec = spec or ExtruderSpec()
    spec.validate()
    smallest = min(spec.nozzle_length_mm, spec.collar_length_mm, spec.joint_length_mm,
                   spec.collar_radius_mm, spec.joint_radius_mm)
    if spacing_mm > smallest:
        raise ValueError(
            f"spacing {spacing_mm} mm exceeds smallest feature {smallest} mm"
        )
    z0 = spec.nozzle_length_mm
    z1 = z0 + spec.collar_length_mm
    z2 = z1 + spec.joint_length_mm
    cone_r = z0 * np.tan(np.radians(spec.cone_half_angle_deg))
    parts = [
        _cone(spec.cone_half_angle_deg, spec.nozzle_length_mm, spacing_mm),
        _disk(cone_r, spec.collar_radius_mm, z0, spacing_mm),
        _tube(spec.collar_radius_mm, z0, z1, spacing_mm),
        _disk(spec.joint_radius_mm, spec.collar_radius_mm, z1, spacing_mm)
        if spec.joint_radius_mm > spec.collar_radius_mm
        else _disk(spec.collar_radius_mm, spec.joint_radius_mm, z1, spacing_mm),
        _tube(spec.joint_radius_mm, z1, z2, spacing_mm),
        _disk(0.0, spec.joint_radius_mm, z2, spacing_mm),
    ]
    pts = np.vstack(parts)
    return ExtruderModel(pts, spacing_mm, spec)
