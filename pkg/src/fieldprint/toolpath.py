"""Toolpath extraction: iso-curve candidates, constrained projection, waypoints.

Shell paths live on {g = u} ∩ {phi = 0}; infill paths on {g = u} ∩ {psi = v}
inside the solid. Candidates come from marching cubes on one field followed
by triangle slicing against the second; every candidate vertex is then
refined by an augmented-Lagrangian projection onto the exact intersection,
resampled to uniform spacing, and re-projected.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .fields import ScalarField

logger = logging.getLogger(__name__)

Array = np.ndarray


# ---------------------------------------------------------------------------
# Field grids


@dataclass
class FieldGrid:
    """Regular grid over the normalized cube with cached field values."""

    res: int
    origin: Array
    spacing: float
    values: Array  # (res, res, res)

    @classmethod
    def sample(cls, fld: ScalarField, res: int = 96, lo: float = -1.0,
               hi: float = 1.0, chunk: int = 65536) -> "FieldGrid":
        xs = np.linspace(lo, hi, res)
        pts = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
        vals = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            vals[s:s + chunk] = fld.values(pts[s:s + chunk])
        return cls(res=res, origin=np.array([lo, lo, lo]),
                   spacing=(hi - lo) / (res - 1), values=vals.reshape(res, res, res))

    def to_world(self, idx_coords: Array) -> Array:
        return self.origin + idx_coords * self.spacing


def marching_surface(grid: FieldGrid, level: float):
    """Marching-cubes triangulation of one iso-surface; ([], []) off-range."""
    v = grid.values
    if not (v.min() < level < v.max()):
        return np.empty((0, 3)), np.empty((0, 3), dtype=int)
    verts, faces, _, _ = measure.marching_cubes(v, level=level)
    return grid.to_world(verts), faces


# ---------------------------------------------------------------------------
# Slicing a triangulated iso-surface by a second scalar field


def slice_mesh(verts: Array, faces: Array, vert_scalar: Array, level: float,
               keep_face_mask: Array | None = None):
    """Intersect a triangle mesh with {scalar = level}; returns polylines.

    Each crossing triangle contributes one segment whose endpoints are
    linearly interpolated on the crossing edges. Endpoints are keyed by mesh
    edge so adjacent triangles chain exactly. Returns a list of
    (points (M,3), closed flag).
    """
    w = vert_scalar - level
    w = np.where(w == 0.0, 1e-14, w)  # nudge exact hits off the level
    fw = w[faces]
    crossing = ~((fw > 0).all(axis=1) | (fw < 0).all(axis=1))
    if keep_face_mask is not None:
        crossing &= keep_face_mask
    tri = faces[crossing]
    if len(tri) == 0:
        return []

    edge_points: dict = {}
    segments = []

    def edge_point(i, j):
        key = (i, j) if i < j else (j, i)
        pt = edge_points.get(key)
        if pt is None:
            t = w[key[0]] / (w[key[0]] - w[key[1]])
            pt = verts[key[0]] + t * (verts[key[1]] - verts[key[0]])
            edge_points[key] = pt
        return key, pt

    for a, b, c in tri:
        keys = []
        for i, j in ((a, b), (b, c), (c, a)):
            if (w[i] > 0) != (w[j] > 0):
                keys.append(edge_point(i, j)[0])
        if len(keys) == 2:
            segments.append((keys[0], keys[1]))

    return _chain_segments(segments, edge_points)


def _chain_segments(segments, edge_points):
    """Chain edge-keyed segments into polylines (closed flag per polyline)."""
    adj: dict = {}
    for si, (ka, kb) in enumerate(segments):
        adj.setdefault(ka, []).append(si)
        adj.setdefault(kb, []).append(si)
    used = np.zeros(len(segments), dtype=bool)
    polylines = []

    def walk(start_seg, start_key):
        chain = [start_key]
        seg = start_seg
        key = start_key
        while True:
            used[seg] = True
            ka, kb = segments[seg]
            key = kb if ka == key else ka
            chain.append(key)
            nxt = [s for s in adj[key] if not used[s]]
            if not nxt:
                return chain
            seg = nxt[0]

    for si in range(len(segments)):
        if used[si]:
            continue
        ka, kb = segments[si]
        # prefer an open end so open paths start at a boundary
        chain = walk(si, ka)
        closed = chain[0] == chain[-1]
        if not closed and len(adj[chain[0]]) > 1:
            tail = chain
            used_backup = used.copy()
            more = [s for s in adj[tail[0]] if not used[s]]
            if more:
                back = walk(more[0], tail[0])
                chain = list(reversed(back))[:-1] + tail
            else:
                used = used_backup
            closed = chain[0] == chain[-1]
        pts = np.array([edge_points[k] for k in (chain[:-1] if closed else chain)])
        if len(pts) >= 2:
            polylines.append((pts, closed))
    return polylines


# ---------------------------------------------------------------------------
# Constrained projection (augmented Lagrangian)


@dataclass
class ProjectionResult:
    x: Array
    converged: Array
    iters: Array
    residual: Array  # length-normalized worst constraint residual


def project_to_isocurve(fields, targets, x0: Array, tol: float = 1e-7,
                        max_outer: int = 10, max_inner: int = 5,
                        mu0: float = 10.0, report_tol: float = 1e-5) -> ProjectionResult:
    """Project points onto the intersection of two level sets.

    Minimizes ||x - x0||^2/2 subject to f_k(x) = t_k for the two fields via
    an augmented Lagrangian with Gauss-Newton inner steps (penalty doubles
    per outer iteration). Residuals are reported in length units, i.e.
    |f - t| / ||grad f||. Points that fail ``report_tol`` after ``max_outer``
    iterations are retried once from a perturbed start, then flagged.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))

    def run(x_init):
        x = x_init.copy()
        n = len(x)
        lam = np.zeros((n, 2))
        mu = np.full(n, mu0)
        active = np.ones(n, dtype=bool)
        iters = np.zeros(n, dtype=int)
        res = np.full(n, np.inf)
        for outer in range(max_outer):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            xa = x[idx]
            lam_a = lam[idx]
            mu_a = mu[idx]
            for _ in range(max_inner):
                c = np.stack([fields[k].values(xa) - targets[k] for k in range(2)], axis=1)
                J = np.stack([fields[k].gradients(xa) for k in range(2)], axis=1)  # (n,2,3)
                grad = (xa - x0[idx]) + np.einsum(
                    "nkd,nk->nd", J, lam_a + mu_a[:, None] * c)
                H = np.eye(3)[None] + mu_a[:, None, None] * np.einsum(
                    "nkd,nke->nde", J, J)
                step = np.linalg.solve(H, -grad[..., None])[..., 0]
                xa = xa + step
            c = np.stack([fields[k].values(xa) - targets[k] for k in range(2)], axis=1)
            J = np.stack([fields[k].gradients(xa) for k in range(2)], axis=1)
            gn = np.linalg.norm(J, axis=2)
            scaled = np.abs(c) / np.maximum(gn, 1e-9)
            res_a = scaled.max(axis=1)
            x[idx] = xa
            res[idx] = res_a
            iters[idx] += 1
            lam[idx] = lam_a + mu_a[:, None] * c
            mu[idx] = mu_a * 2.0
            done = res_a < tol
            active[idx[done]] = False
        return x, res, iters

    x, res, iters = run(x0)
    bad = res >= report_tol
    if bad.any():
        # one deterministic retry from a nudged start
        nudged = x0[bad] + 0.3 * np.array([1e-3, -7e-4, 5e-4])
        x2, res2, it2 = run(nudged)
        better = res2 < res[bad]
        sel = np.flatnonzero(bad)[better]
        x[sel] = x2[better]
        res[sel] = res2[better]
        iters[sel] = it2[better]
    converged = res < report_tol
    if (~converged).any():
        logger.info("projection: %d/%d points failed to reach %.0e",
                    int((~converged).sum()), len(x0), report_tol)
    return ProjectionResult(x=x, converged=converged, iters=iters, residual=res)


# ---------------------------------------------------------------------------
# Arc-length resampling


def polyline_length(points: Array, closed: bool) -> float:
    seg = np.diff(points, axis=0)
    total = np.linalg.norm(seg, axis=1).sum()
    if closed:
        total += np.linalg.norm(points[0] - points[-1])
    return float(total)


def resample_polyline(points: Array, dl: float, closed: bool) -> Array:
    """Uniform arc-length resampling; endpoints preserved on open paths.

    The point count minimizes |spacing - dl|; paths shorter than dl collapse
    to their midpoint.
    """
    if len(points) < 2:
        return points.copy()
    if closed:
        pts = np.vstack([points, points[:1]])
    else:
        pts = points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total < dl:
        mid = np.interp(total / 2.0, cum, np.arange(len(cum)))
        i = int(mid)
        frac = mid - i
        p = pts[i] + frac * (pts[min(i + 1, len(pts) - 1)] - pts[i])
        return p[None, :]
    n_seg = max(int(round(total / dl)), 1)
    if abs(total / max(n_seg, 1) - dl) > abs(total / (n_seg + 1) - dl):
        n_seg += 1
    if closed:
        targets = total * np.arange(n_seg) / n_seg
    else:
        targets = total * np.arange(n_seg + 1) / n_seg
    out = np.empty((len(targets), 3))
    for d in range(3):
        out[:, d] = np.interp(targets, cum, pts[:, d])
    if not closed:
        out[0] = pts[0]
        out[-1] = pts[-1]
    return out


# ---------------------------------------------------------------------------
# Iso-value sets


@dataclass
class IsoValueSets:
    """Layer (U) and infill (V) iso-values plus physical spacings."""

    U: Array
    V: Array
    layer_height_mm: float
    dl_mm: float
    du: float = 0.0  # field-units spacing between consecutive U values
    dv: float = 0.0

    def __post_init__(self):
        if len(self.U) > 1 and not (np.diff(self.U) > 0).all():
            raise ValueError("U must be strictly ascending")
        if len(self.V) > 1 and not (np.diff(self.V) > 0).all():
            raise ValueError("V must be strictly ascending")


def iso_value_sets(g_field: ScalarField, scale_mm: float, layer_height_mm: float,
                   dl_mm: float, surface_probes: Array,
                   psi_field: ScalarField | None = None,
                   interior_probes: Array | None = None,
                   line_spacing_mm: float | None = None,
                   g_range=(0.0, 1.0), margin_frac: float = 0.5) -> IsoValueSets:
    """Derive U (and V) spacings from requested physical intervals.

    The field-space spacing between layers is the physical layer height in
    normalized units times the mean gradient norm over the surface band.
    """
    mean_g = float(np.linalg.norm(g_field.gradients(surface_probes), axis=1).mean())
    du = layer_height_mm / scale_mm * mean_g
    lo, hi = g_range
    u0 = lo + margin_frac * du
    U = np.arange(u0, hi - 0.25 * du, du)
    V = np.empty(0)
    dv = 0.0
    if psi_field is not None:
        if interior_probes is None or line_spacing_mm is None:
            raise ValueError("infill iso-values need interior probes and line spacing")
        pv = psi_field.values(interior_probes)
        mean_p = float(np.linalg.norm(psi_field.gradients(interior_probes), axis=1).mean())
        dv = line_spacing_mm / scale_mm * mean_p
        V = np.arange(pv.min() + margin_frac * dv, pv.max() - 0.25 * dv, dv)
    return IsoValueSets(U=U, V=V, layer_height_mm=layer_height_mm, dl_mm=dl_mm,
                        du=du, dv=dv)


# ---------------------------------------------------------------------------
# Waypoints


CSV_HEADER = ("path_id,index,x_mm,y_mm,z_mm,u,v,seq,label,"
              "qx,qy,qz,qw,lpd_x,lpd_y,lpd_z,ext_scale")
WAYPOINT_FORMAT_VERSION = 1


@dataclass
class WaypointSet:
    """Columnar waypoint storage (normalized positions internally)."""

    pos: Array                  # (N,3) normalized
    u: Array
    v: Array                    # NaN for shell paths
    path_id: Array
    index_in_path: Array
    ext_scale: Array
    scale_mm: float
    center_mm: Array
    seq: Array = None           # printing sequence values (filled by sequencing)
    label: Array = None         # partition order index
    quat: Array = None          # (N,4) x,y,z,w
    lpd: Array = None           # (N,3) local printing direction
    path_closed: dict = field(default_factory=dict)
    flags: Array = None

    def __post_init__(self):
        n = len(self.pos)
        if self.seq is None:
            self.seq = np.zeros(n)
        if self.label is None:
            self.label = np.zeros(n, dtype=int)
        if self.quat is None:
            self.quat = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (n, 1))
        if self.lpd is None:
            self.lpd = np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))
        if self.flags is None:
            self.flags = np.zeros(n, dtype=int)

    def __len__(self):
        return len(self.pos)

    @property
    def pos_mm(self) -> Array:
        return self.pos * self.scale_mm + self.center_mm

    def path_slices(self):
        """Yield (path_id, slice) in ascending path order (rows are sorted)."""
        ids, starts = np.unique(self.path_id, return_index=True)
        order = np.argsort(starts)
        bounds = np.append(starts[order], len(self.pos))
        for k, pid in enumerate(ids[order]):
            yield int(pid), slice(bounds[k], bounds[k + 1])


def write_waypoint_csv(path, wps: WaypointSet, sidecar: dict | None = None):
    pos_mm = wps.pos_mm
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for i in range(len(wps)):
            v = "" if np.isnan(wps.v[i]) else f"{wps.v[i]:.9g}"
            fh.write(
                f"{wps.path_id[i]},{wps.index_in_path[i]},"
                f"{pos_mm[i,0]:.9g},{pos_mm[i,1]:.9g},{pos_mm[i,2]:.9g},"
                f"{wps.u[i]:.9g},{v},{wps.seq[i]:.9g},{wps.label[i]},"
                f"{wps.quat[i,0]:.9g},{wps.quat[i,1]:.9g},{wps.quat[i,2]:.9g},"
                f"{wps.quat[i,3]:.9g},"
                f"{wps.lpd[i,0]:.9g},{wps.lpd[i,1]:.9g},{wps.lpd[i,2]:.9g},"
                f"{wps.ext_scale[i]:.9g}\n"
            )
    if sidecar is not None:
        meta = {"format_version": WAYPOINT_FORMAT_VERSION,
                "scale_mm_per_unit": wps.scale_mm,
                "center_mm": list(np.asarray(wps.center_mm, dtype=float)),
                "count": len(wps), **sidecar}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_waypoint_csv(path):
    """Read a waypoint CSV (+ sidecar when present); returns WaypointSet."""
    rows = np.genfromtxt(path, delimiter=",", names=True, dtype=float,
                         missing_values="", filling_values=np.nan)
    rows = np.atleast_1d(rows)
    meta = {}
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    scale = float(meta.get("scale_mm_per_unit", 1.0))
    center = np.asarray(meta.get("center_mm", [0.0, 0.0, 0.0]))
    pos_mm = np.stack([rows["x_mm"], rows["y_mm"], rows["z_mm"]], axis=1)
    return WaypointSet(
        pos=(pos_mm - center) / scale,
        u=rows["u"], v=rows["v"],
        path_id=rows["path_id"].astype(int),
        index_in_path=rows["index"].astype(int),
        ext_scale=rows["ext_scale"],
        scale_mm=scale, center_mm=center,
        seq=rows["seq"], label=rows["label"].astype(int),
        quat=np.stack([rows["qx"], rows["qy"], rows["qz"], rows["qw"]], axis=1),
        lpd=np.stack([rows["lpd_x"], rows["lpd_y"], rows["lpd_z"]], axis=1),
    )


# ---------------------------------------------------------------------------
# Waypoint generation driver


UNPRINTABLE = 1  # flag bit: extrusion-rate denominator vanished
EXTRUSION_CLAMPED = 2
PROJECTION_FALLBACK = 4


def extrusion_ratio(norms: Array, du: float, scale_mm: float, nozzle_d_mm: float,
                    lo: float = 0.25, hi: float = 0.65):
    """Extrusion scale in nozzle-diameter units from local gradient norms.

    ratio = (du / norm) * scale_mm / D; clamped to [lo, hi] with flags.
    """
    flags = np.zeros(len(norms), dtype=int)
    unprintable = norms < 1e-4
    flags[unprintable] |= UNPRINTABLE
    thickness_mm = du * scale_mm / np.maximum(norms, 1e-4)
    ratio = thickness_mm / nozzle_d_mm
    clamped = (ratio < lo) | (ratio > hi)
    flags[clamped & ~unprintable] |= EXTRUSION_CLAMPED
    return np.clip(ratio, lo, hi), ratio, flags


@dataclass
class ToolpathConfig:
    grid_res: int = 96
    layer_height_mm: float = 1.0
    line_spacing_mm: float = 2.0
    dl_mm: float = 2.5
    nozzle_d_mm: float = 2.5
    reproject_rounds: int = 2
    tol: float = 1e-7
    report_tol: float = 1e-5
    max_drop_fraction: float = 1e-3
    shell: bool = True
    infill: bool = True


def _centroid_angle(points, center):
    c = points.mean(axis=0) - center
    return np.arctan2(c[1], c[0])


def generate_waypoints(g_field, phi_field, scale_mm, center_mm,
                       iso: IsoValueSets, cfg: ToolpathConfig,
                       psi_fields=(), psi_iso_sets=None,
                       model_center=None):
    """Extract, project and resample all shell and infill paths.

    Returns (WaypointSet, report). Deterministic: paths are ordered by
    (u index, centroid angle), waypoints by arc length along each path.
    """
    t_start = time.time()
    model_center = np.zeros(3) if model_center is None else model_center
    dl = cfg.dl_mm / scale_mm

    phi_grid = FieldGrid.sample(phi_field, res=cfg.grid_res)
    paths = []  # (sort key, points, closed, u, v, domain)

    if cfg.shell:
        verts, faces = marching_surface(phi_grid, 0.0)
        if len(verts):
            g_on_shell = g_field.values(verts)
            for ui, u in enumerate(iso.U):
                for pts, closed in slice_mesh(verts, faces, g_on_shell, u):
                    paths.append((("s", ui, _centroid_angle(pts, model_center)),
                                  pts, closed, u, np.nan, "shell"))

    if cfg.infill and len(psi_fields):
        g_grid = FieldGrid.sample(g_field, res=cfg.grid_res)
        psi_list = list(psi_fields)
        v_sets = psi_iso_sets if psi_iso_sets is not None else [iso.V] * len(psi_list)
        for ui, u in enumerate(iso.U):
            verts, faces = marching_surface(g_grid, u)
            if not len(verts):
                continue
            phi_on_layer = phi_field.values(verts)
            inside_face = (phi_on_layer[faces] < 0).all(axis=1)
            for pi, psi in enumerate(psi_list):
                psi_on_layer = psi.values(verts)
                for vi, v in enumerate(v_sets[pi]):
                    for pts, closed in slice_mesh(verts, faces, psi_on_layer, v,
                                                  keep_face_mask=inside_face):
                        paths.append(((u, ui, pi, vi,
                                       _centroid_angle(pts, model_center)),
                                      pts, closed, u, float(v), ("infill", pi)))

    paths.sort(key=lambda rec: rec[0])

    # --- project + resample each path
    all_pos, all_u, all_v, all_pid, all_idx, all_domain = [], [], [], [], [], []
    path_closed = {}
    dropped = 0
    total_iters = []
    pid = 0
    for _, pts, closed, u, v, domain in paths:
        if domain == "shell":
            pair = (g_field, phi_field)
            targets = (u, 0.0)
        else:
            pair = (g_field, psi_fields[domain[1]])
            targets = (u, v)
        cur = pts
        result = None
        for _ in range(max(cfg.reproject_rounds, 1)):
            result = project_to_isocurve(pair, targets, cur, tol=cfg.tol,
                                         report_tol=cfg.report_tol)
            keep = result.converged
            if not keep.all():
                dropped += int((~keep).sum())
                cur = result.x[keep]
                if len(cur) < 2:
                    cur = np.empty((0, 3))
                    break
            else:
                cur = result.x
            total_iters.append(result.iters[keep])
            cur = resample_polyline(cur, dl, closed)
            if len(cur) < 2:
                break
        if len(cur) == 0:
            continue
        if len(cur) >= 2:
            final = project_to_isocurve(pair, targets, cur, tol=cfg.tol,
                                        report_tol=cfg.report_tol)
            keep = final.converged
            dropped += int((~keep).sum())
            cur = final.x[keep]
        if len(cur) == 0:
            continue
        all_pos.append(cur)
        all_u.append(np.full(len(cur), u))
        all_v.append(np.full(len(cur), v if domain != "shell" else np.nan))
        all_pid.append(np.full(len(cur), pid, dtype=int))
        all_idx.append(np.arange(len(cur)))
        all_domain.append(np.full(len(cur), 0 if domain == "shell" else 1, dtype=int))
        path_closed[pid] = bool(closed)
        pid += 1

    if not all_pos:
        raise RuntimeError("no toolpaths extracted; check iso-value sets")
    pos = np.vstack(all_pos)
    u_arr = np.concatenate(all_u)
    v_arr = np.concatenate(all_v)
    pid_arr = np.concatenate(all_pid)
    idx_arr = np.concatenate(all_idx)
    domain_arr = np.concatenate(all_domain)

    # --- extrusion scale from local gradient norms
    grad_g = g_field.gradients(pos)
    grad_phi = phi_field.gradients(pos)
    shell_mask = domain_arr == 0
    norms = np.linalg.norm(grad_g, axis=1)
    if shell_mask.any():
        from .guidance import tangent_project

        v_t = tangent_project(grad_g[shell_mask], grad_phi[shell_mask])
        norms_shell = np.linalg.norm(v_t, axis=1)
        norms = norms.copy()
        norms[shell_mask] = norms_shell
    ext, ext_raw, flags = extrusion_ratio(norms, iso.du, scale_mm, cfg.nozzle_d_mm)

    wps = WaypointSet(pos=pos, u=u_arr, v=v_arr, path_id=pid_arr,
                      index_in_path=idx_arr, ext_scale=ext,
                      scale_mm=scale_mm, center_mm=np.asarray(center_mm),
                      path_closed=path_closed, flags=flags)
    # initial printing direction: the guidance gradient
    gn = np.linalg.norm(grad_g, axis=1, keepdims=True)
    wps.lpd = grad_g / np.maximum(gn, 1e-12)

    elapsed = time.time() - t_start
    n = len(pos)
    drop_fraction = dropped / max(n + dropped, 1)
    iters = np.concatenate(total_iters) if total_iters else np.empty(0, dtype=int)
    report = {
        "n_waypoints": n,
        "n_paths": pid,
        "dropped": dropped,
        "drop_fraction": drop_fraction,
        "elapsed_s": elapsed,
        "waypoints_per_s": n / elapsed if elapsed > 0 else float("inf"),
        "max_projection_iters": int(iters.max()) if len(iters) else 0,
        "extrusion_in_band_fraction": float((flags == 0).mean()),
        "ext_raw_range": [float(ext_raw.min()), float(ext_raw.max())],
    }
    if drop_fraction > cfg.max_drop_fraction:
        report["failure"] = (f"dropped waypoint fraction {drop_fraction:.2e} exceeds "
                             f"{cfg.max_drop_fraction:.0e}")
        logger.error(report["failure"])
    return wps, report


def waypoint_residuals(wps: WaypointSet, g_field, phi_field, psi_fields=()):
    """Length-normalized residuals of every waypoint against its level sets."""
    res_g = np.abs(g_field.values(wps.pos) - wps.u)
    gn = np.linalg.norm(g_field.gradients(wps.pos), axis=1)
    res_g = res_g / np.maximum(gn, 1e-9)
    shell = np.isnan(wps.v)
    res2 = np.empty(len(wps))
    if shell.any():
        pv = phi_field.values(wps.pos[shell])
        pn = np.linalg.norm(phi_field.gradients(wps.pos[shell]), axis=1)
        res2[shell] = np.abs(pv) / np.maximum(pn, 1e-9)
    if (~shell).any():
        if not len(psi_fields):
            raise ValueError("infill waypoints present but no infill fields given")
        # single infill field per v-layer assumed when several are passed
        x = wps.pos[~shell]
        best = np.full(len(x), np.inf)
        for psi in psi_fields:
            pv = np.abs(psi.values(x) - wps.v[~shell])
            pn = np.linalg.norm(psi.gradients(x), axis=1)
            best = np.minimum(best, pv / np.maximum(pn, 1e-9))
        res2[~shell] = best
    return np.maximum(res_g, res2)
