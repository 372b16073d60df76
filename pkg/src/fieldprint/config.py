"""Pipeline configuration: schema, validation, digests.

Configs are plain JSON. ``validate_config`` merges user values over the
published defaults, rejecting unknown keys and wrong types; the sha256
digest of the canonical merged config is embedded in every artifact so
later stages can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json

from .guidance import GuidanceConfig
from .infill import DensityMode, InfillConfig
from .motion import MotionConfig
from .partition import ClassifierConfig
from .sdf import SdfLossWeights, SdfTrainConfig
from .toolpath import ToolpathConfig

# Published schema: key -> default (type implied). Nested dicts validate
# recursively; unknown keys anywhere are rejected.
DEFAULT_CONFIG = {
    "input": {
        "path": "fixture:sphere",
        "format": "",            # xyz | ply | obj; inferred from suffix if empty
        "fixture_points": 10000,
        "fixture_scale_mm": 125.0,
    },
    "seed": 0,
    "nozzle_d_mm": 2.5,
    "layer_height_mm": 1.0,
    "line_spacing_mm": 2.0,
    "dl_mm": 2.5,
    "alpha_deg": 40.0,
    "grid_res": 96,
    "pattern": "",               # cross | diamond | hex; empty = shell only
    "sdf": {
        "hidden": 64, "layers": 5, "omega0": 30.0, "lr": 1e-4,
        "steps": 4000, "min_steps": 500, "batch_surface": 2048,
        "batch_cube": 2048, "lap_frac": 0.25, "lap_anneal_frac": 0.5,
        "target_surface_err": 2.0e-4, "eval_every": 250,
        "w_dist": 3000.0, "w_norm": 100.0, "w_nm": 100.0,
        "w_eikonal": 50.0, "w_lap": 10.0, "gamma": 60.0,
    },
    "guidance": {
        "hidden": 64, "layers": 5, "omega0": 30.0, "lr": 1e-4,
        "w_smooth_s": 1.0, "w_sf_s": 0.5, "w_coll_ob": 1.0, "w_kappa": 1.0,
        "w_smooth_omega": 1.0, "w_align": 10.0, "k_sf": 30.0,
        "epochs_warmup": 20, "epochs_surface": 60, "epochs_interior": 60,
        "steps_per_epoch": 10, "batch": 1024, "h_bottom": 0.05,
    },
    "infill": {
        "hidden": 48, "layers": 5, "omega0": 20.0, "lr": 1e-4,
        "w_density": 1.0, "w_sf": 0.5, "w_smooth": 0.1, "w_ref": 1.0,
        "ref_anneal": 0.1, "k_sf": 30.0, "steps": 600, "batch": 2048,
        "d_ref": [1.0, 0.0, 0.0],
        "density_mode": "constant", "density_c": 8.0,
        "density_rho_min": 4.0, "density_rho_max": 12.0, "density_lam": 0.1,
    },
    "classifier": {
        "hidden": 256, "layers": 3, "lr": 1e-3, "epochs": 60,
        "batch": 4096, "holdout_frac": 0.1, "target_accuracy": 0.995,
    },
    "motion": {
        "w_coll": 10.0, "w_sf": 1.0, "w_smooth": 0.1, "k_sf": 30.0,
        "batch_waypoints": 100000, "epochs": 40, "steps_per_epoch": 5,
        "lr": 1e-4, "hidden": 48, "layers": 5, "omega0": 10.0,
        "extruder_stride": 4, "max_refinements": 3, "smooth_mode": "axes",
    },
    "extruder": {
        "cone_half_angle_deg": 20.0, "nozzle_length_mm": 40.0,
        "collar_radius_mm": 25.0, "collar_length_mm": 20.0,
        "joint_radius_mm": 30.0, "joint_length_mm": 60.0,
        "spacing_mm": 3.0,
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config section '{path or '<root>'}' must be an object")
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            here = f"{path}.{key}" if path else key
            if isinstance(dval, dict):
                out[key] = _merge(dval, uval, here)
            else:
                if isinstance(dval, bool) != isinstance(uval, bool):
                    raise ConfigError(f"config key '{here}' has wrong type")
                if isinstance(dval, (int, float)) and isinstance(uval, (int, float)) \
                        and not isinstance(uval, bool):
                    out[key] = type(dval)(uval) if not isinstance(dval, float) else float(uval)
                elif isinstance(uval, type(dval)):
                    out[key] = uval
                else:
                    raise ConfigError(
                        f"config key '{here}' expects {type(dval).__name__}, "
                        f"got {type(uval).__name__}")
        else:
            out[key] = dval
    unknown = set(user) - set(defaults)
    if unknown:
        where = path or "<root>"
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")
    return out


def validate_config(user: dict | None) -> dict:
    """Merge a user config over the defaults; reject unknown keys/types."""
    return _merge(DEFAULT_CONFIG, user or {})


def load_config(path) -> dict:
    with open(path) as fh:
        return validate_config(json.load(fh))


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Views onto the per-module dataclasses


def sdf_config(cfg: dict) -> SdfTrainConfig:
    s = cfg["sdf"]
    return SdfTrainConfig(
        hidden=s["hidden"], layers=s["layers"], omega0=s["omega0"], lr=s["lr"],
        steps=s["steps"], min_steps=s["min_steps"],
        batch_surface=s["batch_surface"], batch_cube=s["batch_cube"],
        lap_frac=s["lap_frac"], lap_anneal_frac=s["lap_anneal_frac"],
        target_surface_err=s["target_surface_err"], eval_every=s["eval_every"],
        seed=cfg["seed"],
        weights=SdfLossWeights(w_dist=s["w_dist"], w_norm=s["w_norm"],
                               w_nm=s["w_nm"], w_eikonal=s["w_eikonal"],
                               w_lap=s["w_lap"], gamma=s["gamma"]),
    )


def guidance_config(cfg: dict) -> GuidanceConfig:
    g = cfg["guidance"]
    return GuidanceConfig(
        w_smooth_s=g["w_smooth_s"], w_sf_s=g["w_sf_s"], w_coll_ob=g["w_coll_ob"],
        w_kappa=g["w_kappa"], w_smooth_omega=g["w_smooth_omega"],
        w_align=g["w_align"], k_sf=g["k_sf"], alpha_deg=cfg["alpha_deg"],
        epochs_warmup=g["epochs_warmup"], epochs_surface=g["epochs_surface"],
        epochs_interior=g["epochs_interior"], steps_per_epoch=g["steps_per_epoch"],
        batch=g["batch"], lr=g["lr"], hidden=g["hidden"], layers=g["layers"],
        omega0=g["omega0"], h_bottom=g["h_bottom"], seed=cfg["seed"],
    )


def infill_config(cfg: dict) -> InfillConfig:
    i = cfg["infill"]
    density = DensityMode(kind="constant", c=i["density_c"],
                          rho_min=i["density_rho_min"], rho_max=i["density_rho_max"],
                          lam=i["density_lam"])
    if i["density_mode"] == "feature":
        density.kind = "feature"
    return InfillConfig(
        w_density=i["w_density"], w_sf=i["w_sf"], w_smooth=i["w_smooth"],
        w_ref=i["w_ref"], ref_anneal=i["ref_anneal"], k_sf=i["k_sf"],
        alpha_deg=cfg["alpha_deg"], d_ref=tuple(i["d_ref"]), density=density,
        steps=i["steps"], batch=i["batch"], lr=i["lr"], hidden=i["hidden"],
        layers=i["layers"], omega0=i["omega0"], seed=cfg["seed"],
    )


def classifier_config(cfg: dict) -> ClassifierConfig:
    c = cfg["classifier"]
    return ClassifierConfig(
        hidden=c["hidden"], layers=c["layers"], lr=c["lr"], epochs=c["epochs"],
        batch=c["batch"], holdout_frac=c["holdout_frac"],
        target_accuracy=c["target_accuracy"], seed=cfg["seed"],
    )


def motion_config(cfg: dict) -> MotionConfig:
    m = cfg["motion"]
    return MotionConfig(
        w_coll=m["w_coll"], w_sf=m["w_sf"], w_smooth=m["w_smooth"],
        k_sf=m["k_sf"], alpha_deg=cfg["alpha_deg"],
        batch_waypoints=m["batch_waypoints"], epochs=m["epochs"],
        steps_per_epoch=m["steps_per_epoch"], lr=m["lr"], hidden=m["hidden"],
        layers=m["layers"], omega0=m["omega0"],
        extruder_stride=m["extruder_stride"],
        max_refinements=m["max_refinements"], seed=cfg["seed"],
        smooth_mode=m["smooth_mode"],
    )


def toolpath_config(cfg: dict) -> ToolpathConfig:
    return ToolpathConfig(
        grid_res=cfg["grid_res"], layer_height_mm=cfg["layer_height_mm"],
        line_spacing_mm=cfg["line_spacing_mm"], dl_mm=cfg["dl_mm"],
        nozzle_d_mm=cfg["nozzle_d_mm"], infill=bool(cfg["pattern"]),
    )
