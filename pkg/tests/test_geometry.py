"""Geometry ingestion, normalization, extruder model, stratified sampling."""

import numpy as np
import pytest
from scipy.stats import chisquare

from fieldprint.fixtures import make_fixture, make_sphere, sd_sphere
from fieldprint.geometry import (
    ExtruderSpec,
    build_extruder,
    cloud_from_mm,
    estimate_normals,
    load_cloud,
    normalize_points,
    save_xyz,
)
from fieldprint.sampling import stratified_samples


def sphere_cloud_mm(n=10000, r_mm=80.0, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return r_mm * d, d


class TestNormalization:
    def test_sphere_bbox_and_radius(self):
        pts_mm, normals = sphere_cloud_mm()
        cloud = cloud_from_mm(pts_mm, normals)
        assert np.allclose(cloud.bbox_mm, 160.0, atol=1.0)
        # radius constant up to the bbox-center sampling offset
        r_norm = np.linalg.norm(cloud.points, axis=1)
        assert r_norm.std() < 5e-3 * r_norm.mean()

    def test_round_trip(self):
        pts_mm, normals = sphere_cloud_mm(2000)
        cloud = cloud_from_mm(pts_mm, normals)
        back = cloud.denormalize(cloud.points)
        # round trip to 1e-9 relative
        assert np.abs(back - pts_mm[:len(back)]).max() < 1e-9 * 80.0

    def test_degenerate_bbox_rejected(self):
        with pytest.raises(ValueError):
            normalize_points(np.zeros((10, 3)))

    def test_duplicates_collapsed(self):
        pts_mm, normals = sphere_cloud_mm(3000)
        doubled = np.vstack([pts_mm, pts_mm + 1e-9])
        cloud = cloud_from_mm(doubled, np.vstack([normals, normals]))
        assert len(cloud.points) == 3000

    def test_small_cloud_warns(self, caplog):
        pts_mm, normals = sphere_cloud_mm(500)
        with caplog.at_level("WARNING"):
            cloud_from_mm(pts_mm, normals)
        assert any("<1000" in r.message for r in caplog.records)


class TestLoaders:
    def test_xyz_round_trip(self, tmp_path):
        cloud, _ = make_sphere(n=1500, seed=1)
        path = tmp_path / "m.xyz"
        save_xyz(path, cloud)
        loaded = load_cloud(path)
        assert len(loaded.points) == len(cloud.points)
        # reloading re-fits the bbox, so the radius shifts by sampling error
        assert np.abs(np.linalg.norm(loaded.points, axis=1) - 0.8).max() < 2e-3

    def test_obj_vertices(self, tmp_path):
        cloud, _ = make_sphere(n=1200, seed=2)
        pts = cloud.denormalize(cloud.points)
        path = tmp_path / "m.obj"
        with open(path, "w") as fh:
            for p, n in zip(pts, cloud.normals):
                fh.write(f"v {p[0]} {p[1]} {p[2]}\n")
                fh.write(f"vn {n[0]} {n[1]} {n[2]}\n")
        loaded = load_cloud(path)
        assert len(loaded.points) == 1200
        dots = np.einsum("nd,nd->n", loaded.normals, loaded.points)
        assert (dots > 0.99 * np.linalg.norm(loaded.points, axis=1)).all()

    def test_ply_ascii_and_binary(self, tmp_path):
        cloud, _ = make_sphere(n=1100, seed=3)
        pts = cloud.denormalize(cloud.points).astype(np.float32)
        nrm = cloud.normals.astype(np.float32)
        header = (b"ply\nformat %s 1.0\nelement vertex %d\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"property float nx\nproperty float ny\nproperty float nz\n"
                  b"end_header\n")
        ascii_path = tmp_path / "a.ply"
        with open(ascii_path, "wb") as fh:
            fh.write(header % (b"ascii", len(pts)))
            for p, n in zip(pts, nrm):
                fh.write(f"{p[0]} {p[1]} {p[2]} {n[0]} {n[1]} {n[2]}\n".encode())
        bin_path = tmp_path / "b.ply"
        rec = np.hstack([pts, nrm]).astype("<f4")
        with open(bin_path, "wb") as fh:
            fh.write(header % (b"binary_little_endian", len(pts)))
            fh.write(rec.tobytes())
        a = load_cloud(ascii_path)
        b = load_cloud(bin_path)
        assert len(a.points) == len(b.points)
        assert np.allclose(a.points, b.points, atol=1e-6)

    def test_normal_estimation_outward(self):
        pts_mm, truth = sphere_cloud_mm(4000, seed=5)
        cloud = cloud_from_mm(pts_mm, normals=None)
        est = cloud.normals
        radial = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
        dots = np.einsum("nd,nd->n", est, radial)
        assert (dots > 0.95).mean() > 0.99


class TestExtruder:
    def test_cone_points_satisfy_inequality(self):
        spec = ExtruderSpec()
        model = build_extruder(spec, spacing_mm=3.0)
        # strictly below the collar interface plane: pure nozzle cone
        cone = model.points[model.points[:, 2] < spec.nozzle_length_mm - 1e-9]
        assert len(cone) > 20
        r = np.hypot(cone[:, 0], cone[:, 1])
        assert (r <= cone[:, 2] * np.tan(np.radians(spec.cone_half_angle_deg)) + 1e-9).all()

    def test_tip_at_origin_and_count(self):
        model = build_extruder(spacing_mm=3.0)
        assert np.linalg.norm(model.points, axis=1).min() < 1e-12
        assert len(model.points) >= 100

    def test_halved_spacing_quadruples_count(self):
        big = build_extruder(spacing_mm=4.0)
        small = build_extruder(spacing_mm=2.0)
        ratio = len(small.points) / len(big.points)
        assert 4.0 * 0.8 <= ratio <= 4.0 * 1.2

    def test_oversized_spacing_rejected(self):
        with pytest.raises(ValueError):
            build_extruder(spacing_mm=100.0)


class TestStratifiedSamples:
    def test_sphere_octant_uniformity(self):
        cloud, _ = make_sphere(n=12000, seed=7)
        ss = stratified_samples(cloud, None,
                                counts={"surface": 8000, "interior": 0,
                                        "offsurface": 100, "bottom": 0},
                                seed=7)
        oct_idx = ((ss.surface_points[:, 0] > 0).astype(int) * 4
                   + (ss.surface_points[:, 1] > 0).astype(int) * 2
                   + (ss.surface_points[:, 2] > 0).astype(int))
        counts = np.bincount(oct_idx, minlength=8)
        assert chisquare(counts).pvalue > 0.01

    def test_bottom_slab(self):
        cloud, _ = make_sphere(n=8000, seed=8)
        ss = stratified_samples(cloud, None,
                                counts={"surface": 4000, "interior": 0,
                                        "offsurface": 100, "bottom": 500},
                                h_bottom=0.05, seed=8)
        z_min = cloud.points[:, 2].min()
        assert len(ss.bottom) > 0
        assert (ss.bottom[:, 2] < z_min + 0.05).all()

    def test_weights_normalized(self):
        cloud, _ = make_fixture("cylinder", n=6000, seed=9)
        ss = stratified_samples(cloud, None,
                                counts={"surface": 3000, "interior": 0,
                                        "offsurface": 10, "bottom": 0}, seed=9)
        assert ss.surface_weights.min() > 0
        assert abs(ss.surface_weights.sum() - 1.0) < 1e-9

    def test_reproducible(self):
        cloud, _ = make_sphere(n=5000, seed=10)
        a = stratified_samples(cloud, None, seed=3)
        b = stratified_samples(cloud, None, seed=3)
        assert np.array_equal(a.surface_points, b.surface_points)
        assert np.array_equal(a.offsurface, b.offsurface)


class TestFixtures:
    @pytest.mark.parametrize("name", ["sphere", "torus", "slab", "cylinder",
                                      "ybranch", "twobranch"])
    def test_cloud_on_zero_level_set(self, name):
        cloud, oracle = make_fixture(name, n=3000, seed=11)
        vals = oracle.values(cloud.points)
        assert np.abs(vals).max() < 1e-6
        # normals agree with the SDF gradient
        grads = oracle.gradients(cloud.points)
        gn = np.linalg.norm(grads, axis=1, keepdims=True)
        dots = np.einsum("nd,nd->n", grads / np.maximum(gn, 1e-12), cloud.normals)
        assert (dots > 0.99).mean() > 0.98
