"""Stage orchestration: artifacts, digests, atomic writes, stage wiring.

Each stage reads its predecessors' artifacts from the output directory,
verifies their config digest, and writes its own artifacts atomically
(temp + rename) with the digest embedded. Stages hold a simple lockfile so
only one runs per output directory at a time.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from urllib.parse import parse_qsl, urlparse

import numpy as np

from . import config as cfgmod
from .fields import SirenField, load_checkpoint, save_checkpoint
from .fixtures import make_fixture
from .geometry import ExtruderModel, ExtruderSpec, ModelCloud, build_extruder, load_cloud
from .guidance import train_guidance
from .infill import train_infill_set
from .motion import MotionConfig, plan_motion
from .partition import build_reeb, label_waypoints, train_classifier
from .sampling import stratified_samples
from .sdf import train_sdf
from .toolpath import (
    IsoValueSets,
    generate_waypoints,
    iso_value_sets,
    read_waypoint_csv,
    waypoint_residuals,
    write_waypoint_csv,
)

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


class DigestMismatch(StageError):
    pass


@contextmanager
def _dir_lock(out: Path):
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(
            f"output directory is locked by another stage ({lock}); "
            "remove the lockfile if that run is dead") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def atomic_write_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_json(path: Path, payload: dict):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True,
                                       default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_metrics(path: Path, records: list):
    """Line-delimited JSON, one record per epoch/iteration."""
    lines = [json.dumps(r, sort_keys=True, default=_json_default) for r in records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _check_digest(meta_digest: str, digest: str, what: str, override: bool):
    if meta_digest != digest:
        msg = (f"{what} was produced with config digest {meta_digest}, current "
               f"config digest is {digest}; rerun the earlier stage or pass "
               "--override-digest")
        if override:
            logger.warning("%s (overridden)", msg)
        else:
            raise DigestMismatch(msg)


def _require(path: Path, stage: str):
    if not path.exists():
        raise StageError(f"missing artifact {path.name}; run the `{stage}` stage first")
    return path


# ---------------------------------------------------------------------------
# Model input


def load_model(cfg: dict) -> ModelCloud:
    """Load the input model: a file path or a fixture URI like
    ``fixture:torus?n=20000&scale_mm=150``."""
    path = cfg["input"]["path"]
    if path.startswith("fixture:"):
        parsed = urlparse(path)
        name = parsed.path
        args = dict(parse_qsl(parsed.query))
        n = int(args.pop("n", cfg["input"]["fixture_points"]))
        scale = float(args.pop("scale_mm", cfg["input"]["fixture_scale_mm"]))
        kwargs = {k: float(v) for k, v in args.items()}
        cloud, _ = make_fixture(name, n=n, seed=cfg["seed"], scale_mm=scale, **kwargs)
        return cloud
    fmt = cfg["input"]["format"] or None
    return load_cloud(path, fmt)


def extruder_from_config(cfg: dict) -> ExtruderModel:
    e = cfg["extruder"]
    spec = ExtruderSpec(
        cone_half_angle_deg=e["cone_half_angle_deg"],
        nozzle_length_mm=e["nozzle_length_mm"],
        collar_radius_mm=e["collar_radius_mm"],
        collar_length_mm=e["collar_length_mm"],
        joint_radius_mm=e["joint_radius_mm"],
        joint_length_mm=e["joint_length_mm"],
    )
    return build_extruder(spec, e["spacing_mm"])


# ---------------------------------------------------------------------------
# Stages


def stage_train_sdf(cfg: dict, out: Path) -> dict:
    digest = cfgmod.config_digest(cfg)
    with _dir_lock(out):
        cloud = load_model(cfg)
        params, report = train_sdf(cloud, cfgmod.sdf_config(cfg))
        save_checkpoint(out / "sdf.ckpt.npz", params, config_digest=digest,
                        extra={"scale_mm": cloud.scale_mm_per_unit,
                               "center_mm": cloud.center_mm,
                               "bbox_mm": cloud.bbox_mm})
        write_metrics(out / "sdf_metrics.jsonl", report.pop("curves"))
        atomic_write_json(out / "sdf_report.json", report)
    return report


def _load_sdf(cfg, out, override=False):
    digest = cfgmod.config_digest(cfg)
    params, _, meta = load_checkpoint(_require(out / "sdf.ckpt.npz", "train-sdf"))
    _check_digest(meta["config_digest"], digest, "sdf checkpoint", override)
    return params, meta


def stage_train_guidance(cfg: dict, out: Path, override=False) -> dict:
    digest = cfgmod.config_digest(cfg)
    with _dir_lock(out):
        sdf_params, _ = _load_sdf(cfg, out, override)
        cloud = load_model(cfg)
        result = train_guidance(sdf_params, cloud, cfgmod.guidance_config(cfg))
        save_checkpoint(out / "guidance.ckpt.npz", result.params,
                        config_digest=digest,
                        extra={"value_range": np.asarray(result.value_range)})
        report = dict(result.report)
        curves = report.pop("curves")
        write_metrics(out / "guidance_metrics.jsonl",
                      [dict(stage=k, **row) for k, rows in curves.items() for row in rows])
        sing_lines = [f"{len(report['singularities'])} singularities "
                      f"(|v_T| < 1e-2 clusters)"]
        for c in report["singularities"]:
            sing_lines.append(
                f"  at ({c['centroid'][0]:+.4f}, {c['centroid'][1]:+.4f}, "
                f"{c['centroid'][2]:+.4f}) size {c['size']} min|v_T| {c['min_norm']:.2e}")
        atomic_write_text(out / "singularities.txt", "\n".join(sing_lines) + "\n")
        atomic_write_json(out / "guidance_report.json", report)
    return report


def stage_train_infill(cfg: dict, out: Path, override=False) -> dict:
    if not cfg["pattern"]:
        raise StageError("config.pattern is empty; nothing to train")
    digest = cfgmod.config_digest(cfg)
    with _dir_lock(out):
        sdf_params, _ = _load_sdf(cfg, out, override)
        g_params, _, gmeta = load_checkpoint(
            _require(out / "guidance.ckpt.npz", "train-guidance"))
        _check_digest(gmeta["config_digest"], digest, "guidance checkpoint", override)
        cloud = load_model(cfg)
        samples = stratified_samples(
            cloud, sdf_params,
            counts={"surface": 0, "interior": 20000, "offsurface": 0, "bottom": 0},
            seed=cfg["seed"])
        results, manifest = train_infill_set(
            g_params, sdf_params, samples.interior, cfg["pattern"],
            cfgmod.infill_config(cfg))
        for k, r in enumerate(results):
            save_checkpoint(out / f"infill_psi{k}.ckpt.npz", r["params"],
                            config_digest=digest,
                            extra={"value_range": np.asarray(r["value_range"]),
                                   "beta_deg": r["beta_deg"]})
        for pair in manifest["pairwise_angles_deg"]:
            pair.pop("angles_deg", None)
        atomic_write_json(out / "infill_manifest.json", manifest)
    return manifest


def _load_fields(cfg, out, override=False):
    digest = cfgmod.config_digest(cfg)
    sdf_params, smeta = _load_sdf(cfg, out, override)
    g_params, _, gmeta = load_checkpoint(
        _require(out / "guidance.ckpt.npz", "train-guidance"))
    _check_digest(gmeta["config_digest"], digest, "guidance checkpoint", override)
    psi = []
    k = 0
    while (out / f"infill_psi{k}.ckpt.npz").exists():
        p, _, pmeta = load_checkpoint(out / f"infill_psi{k}.ckpt.npz")
        _check_digest(pmeta["config_digest"], digest, f"infill checkpoint {k}", override)
        psi.append(p)
        k += 1
    return sdf_params, g_params, psi, smeta


def stage_gen_waypoints(cfg: dict, out: Path, override=False) -> dict:
    digest = cfgmod.config_digest(cfg)
    with _dir_lock(out):
        sdf_params, g_params, psi_params, smeta = _load_fields(cfg, out, override)
        if cfg["pattern"] and not psi_params:
            raise StageError("pattern configured but no infill checkpoints; "
                             "run the `train-infill` stage first")
        cloud = load_model(cfg)
        g_field = SirenField(g_params)
        phi_field = SirenField(sdf_params)
        psi_fields = [SirenField(p) for p in psi_params]
        tp_cfg = cfgmod.toolpath_config(cfg)
        interior = None
        if psi_fields:
            samples = stratified_samples(
                cloud, sdf_params,
                counts={"surface": 0, "interior": 4000, "offsurface": 0, "bottom": 0},
                seed=cfg["seed"] + 1)
            interior = samples.interior
        iso = iso_value_sets(
            g_field, cloud.scale_mm_per_unit, cfg["layer_height_mm"], cfg["dl_mm"],
            surface_probes=cloud.points,
            psi_field=psi_fields[0] if psi_fields else None,
            interior_probes=interior,
            line_spacing_mm=cfg["line_spacing_mm"] if psi_fields else None)
        psi_iso = None
        if psi_fields:
            psi_iso = [iso.V]
            for p in psi_fields[1:]:
                extra = iso_value_sets(
                    g_field, cloud.scale_mm_per_unit, cfg["layer_height_mm"],
                    cfg["dl_mm"], surface_probes=cloud.points, psi_field=p,
                    interior_probes=interior,
                    line_spacing_mm=cfg["line_spacing_mm"])
                psi_iso.append(extra.V)
        wps, report = generate_waypoints(
            g_field, phi_field, cloud.scale_mm_per_unit, cloud.center_mm, iso,
            tp_cfg, psi_fields=psi_fields, psi_iso_sets=psi_iso)
        if "failure" in report:
            raise StageError(report["failure"])
        sidecar = {"config_digest": digest, "stage": "gen-waypoints",
                   "U": iso.U, "du": iso.du, "report": report}
        write_waypoint_csv(out / "waypoints.csv", wps, sidecar)
    return report


def _rebuild_graph(cfg, out, override=False):
    sdf_params, g_params, psi_params, _ = _load_fields(cfg, out, override)
    with open(out / "waypoints.csv.json") as fh:
        meta = json.load(fh)
    U = np.asarray(meta["U"])
    cloud = load_model(cfg)
    layer_norm = cfg["layer_height_mm"] / cloud.scale_mm_per_unit
    graph = build_reeb(SirenField(g_params), SirenField(sdf_params), U,
                       layer_norm, grid_res=cfg["grid_res"])
    return graph, sdf_params, g_params, psi_params, cloud


def _dump_graph(out: Path, graph, name="partition_graph.txt"):
    lines = [f"nodes {len(graph.nodes)} edges {len(graph.edges)} "
             f"labels {graph.n_labels}"]
    for n in graph.nodes:
        lines.append(f"node {n.node_id} level {n.level} u {n.u:.6g} "
                     f"centroid {n.centroid[0]:+.4f},{n.centroid[1]:+.4f},"
                     f"{n.centroid[2]:+.4f} voxels {n.n_voxels} "
                     f"label {graph.labels[n.node_id]}")
    for a, b in sorted(graph.edges):
        lines.append(f"edge {a} {b}")
    lines.append("order " + " ".join(str(lab) for lab in graph.order))
    atomic_write_text(out / name, "\n".join(lines) + "\n")


def stage_partition(cfg: dict, out: Path, override=False) -> dict:
    digest = cfgmod.config_digest(cfg)
    with _dir_lock(out):
        _require(out / "waypoints.csv", "gen-waypoints")
        graph, sdf_params, g_params, psi_params, cloud = _rebuild_graph(
            cfg, out, override)
        wps = read_waypoint_csv(out / "waypoints.csv")
        labels = label_waypoints(graph, wps)
        wps.label = labels
        wps.seq = wps.u + labels
        classifier, cls_report = train_classifier(wps, labels,
                                                  cfgmod.classifier_config(cfg))
        np.savez(out / "classifier.ckpt.npz",
                 n_layers=np.int64(len(classifier.params.weights)),
                 n_classes=np.int64(classifier.n_classes),
                 config_digest=np.bytes_(digest.encode()),
                 **{f"w{k}": w for k, w in enumerate(classifier.params.weights)},
                 **{f"b{k}": b for k, b in enumerate(classifier.params.biases)})
        _dump_graph(out, graph)
        with open(out / "waypoints.csv.json") as fh:
            sidecar = json.load(fh)
        sidecar["stage"] = "partition"
        sidecar["n_labels"] = graph.n_labels
        write_waypoint_csv(out / "waypoints.csv", wps, sidecar)
        report = {"n_labels": graph.n_labels, "order": graph.order,
                  "classifier": cls_report}
        atomic_write_json(out / "partition_report.json", report)
    return report


def stage_plan_motion(cfg: dict, out: Path, override=False) -> dict:
    digest = cfgmod.config_digest(cfg)
    with _dir_lock(out):
        _require(out / "classifier.ckpt.npz", "partition")
        graph, sdf_params, g_params, psi_params, cloud = _rebuild_graph(
            cfg, out, override)
        wps = read_waypoint_csv(out / "waypoints.csv")
        extruder = extruder_from_config(cfg)
        wps, graph, quat_params, report = plan_motion(
            wps, SirenField(sdf_params), SirenField(g_params), graph, extruder,
            cfgmod.motion_config(cfg))
        save_checkpoint(out / "motion.ckpt.npz", quat_params, config_digest=digest)
        _dump_graph(out, graph, name="partition_graph_final.txt")
        with open(out / "waypoints.csv.json") as fh:
            sidecar = json.load(fh)
        sidecar["stage"] = "plan-motion"
        sidecar["r_coll_history"] = report["r_coll_history"]
        write_waypoint_csv(out / "waypoints_final.csv", wps, sidecar)
        lines = ["iteration r_coll n_labels"]
        for row in report["r_coll_history"]:
            lines.append(f"{row['refinement']} {row['r_coll']:.6f} {row['n_labels']}")
        if report.get("colliding_ids"):
            lines.append("colliding waypoints: "
                         + " ".join(str(i) for i in report["colliding_ids"][:200]))
        atomic_write_text(out / "collision_report.txt", "\n".join(lines) + "\n")
        atomic_write_json(out / "motion_report.json",
                          {k: v for k, v in report.items() if k != "colliding_ids"})
        if "failure" in report:
            raise StageError(report["failure"])
    return report


def stage_verify(cfg: dict, out: Path, override=False) -> dict:
    """Recompute the artifact-level acceptance checks from saved artifacts."""
    digest = cfgmod.config_digest(cfg)
    sdf_params, g_params, psi_params, smeta = _load_fields(cfg, out, override)
    wps = read_waypoint_csv(_require(out / "waypoints_final.csv", "plan-motion"))
    phi_field = SirenField(sdf_params)
    g_field = SirenField(g_params)
    psi_fields = [SirenField(p) for p in psi_params]

    checks = {}
    res = waypoint_residuals(wps, g_field, phi_field, psi_fields)
    checks["residuals_below_1e-5"] = {
        "pass": bool((res < 1e-5).all()),
        "max_residual": float(res.max()),
        "fraction_ok": float((res < 1e-5).mean()),
    }
    shell = np.isnan(wps.v)
    grad_phi = phi_field.gradients(wps.pos[shell])
    n_hat = grad_phi / np.maximum(np.linalg.norm(grad_phi, axis=1, keepdims=True), 1e-12)
    dots = np.abs(np.einsum("nd,nd->n", wps.lpd[shell], n_hat))
    ok_sf = dots <= np.sin(np.radians(cfg["alpha_deg"])) + 1e-3
    checks["support_free"] = {"pass": bool(ok_sf.all()),
                              "fraction_ok": float(ok_sf.mean()),
                              "worst_dot": float(dots.max())}
    with open(out / "waypoints_final.csv.json") as fh:
        sidecar = json.load(fh)
    hist = sidecar.get("r_coll_history", [])
    checks["collision_free"] = {"pass": bool(hist and hist[-1]["r_coll"] == 0.0),
                                "r_coll_history": hist}
    in_band = (wps.ext_scale >= 0.25 - 1e-9) & (wps.ext_scale <= 0.65 + 1e-9)
    checks["extrusion_band"] = {"pass": bool(in_band.mean() >= 0.99),
                                "fraction_ok": float(in_band.mean())}
    quat_norm = np.abs(np.linalg.norm(wps.quat, axis=1) - 1.0)
    checks["quaternions_unit"] = {"pass": bool(quat_norm.max() < 1e-8),
                                  "worst": float(quat_norm.max())}

    report = {"config_digest": digest, "checks": checks,
              "pass": all(c["pass"] for c in checks.values())}
    atomic_write_json(out / "verify_report.json", report)
    lines = []
    for name, c in checks.items():
        lines.append(f"{'PASS' if c['pass'] else 'FAIL'} {name}")
    lines.append(("PASS" if report["pass"] else "FAIL") + " overall")
    atomic_write_text(out / "verify_report.txt", "\n".join(lines) + "\n")
    for line in lines:
        logger.info("%s", line)
    return report


STAGES = {
    "train-sdf": stage_train_sdf,
    "train-guidance": stage_train_guidance,
    "train-infill": stage_train_infill,
    "gen-waypoints": stage_gen_waypoints,
    "partition": stage_partition,
    "plan-motion": stage_plan_motion,
    "verify": stage_verify,
}

RUN_ALL_ORDER = ["train-sdf", "train-guidance", "train-infill", "gen-waypoints",
                 "partition", "plan-motion", "verify"]


def run_stage(name: str, cfg: dict, out: Path, override=False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    fn = STAGES[name]
    if name == "train-sdf":
        return fn(cfg, out)
    return fn(cfg, out, override=override)


def run_all(cfg: dict, out: Path, override=False) -> dict:
    reports = {}
    for name in RUN_ALL_ORDER:
        if name == "train-infill" and not cfg["pattern"]:
            continue
        logger.info("=== stage %s", name)
        reports[name] = run_stage(name, cfg, out, override)
    return reports
