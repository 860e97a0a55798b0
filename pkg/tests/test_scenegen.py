from __future__ import annotations

import json
import math

import numpy as np
import pytest

from neusdf.field import Box, Difference, Scene, Sphere
from neusdf.scenegen import (Camera, DatasetError, camera_ring, default_intrinsics, load_dataset,
                             multi_ring, pixel_ray, read_ppm, render_ground_truth, save_dataset,
                             trace_image, HeadlightModel, write_ppm)

RED = Scene(Sphere((0, 0, 0), 1.0, albedo=(1.0, 0.0, 0.0)), bounding_radius=1.5)
UNIT = Scene(Sphere((0, 0, 0), 1.0), bounding_radius=1.5)


def _point_line_distance(p, origin, direction):
    v = np.asarray(p) - origin
    return np.linalg.norm(v - (v @ direction) * direction)


class TestCameraRing:
    def test_azimuths(self):
        cams = camera_ring(4, 3.0, elevation_deg=0.0)
        az = [math.degrees(math.atan2(c.center[1], c.center[0])) % 360 for c in cams]
        np.testing.assert_allclose(az, [0, 90, 180, 270], atol=1e-9)
        np.testing.assert_allclose([np.linalg.norm(c.center) for c in cams], 3.0)

    def test_forward_passes_through_target(self):
        target = np.array([0.1, -0.2, 0.3])
        for c in camera_ring(7, 3.0, 35.0, look_at=target):
            assert _point_line_distance(target, c.center, c.forward) < 1e-9

    def test_up_is_z(self):
        for c in camera_ring(5, 3.0, 20.0):
            down = c.rotation[:, 1]
            assert down[2] < 0
            np.testing.assert_allclose(c.rotation.T @ c.rotation, np.eye(3), atol=1e-12)
            assert np.linalg.det(c.rotation) == pytest.approx(1.0)

    def test_principal_point_ray_is_forward(self):
        intr = default_intrinsics(64, 48, 50.0)
        for c in camera_ring(3, 3.0, 20.0, intrinsics=intr):
            ray = pixel_ray(c, c.cx, c.cy)
            np.testing.assert_allclose(ray.direction, c.forward, atol=1e-12)
            np.testing.assert_allclose(ray.origin, c.center)

    def test_rejects_invalid(self):
        with pytest.raises(ValueError):
            camera_ring(1, 3.0)
        with pytest.raises(ValueError):
            camera_ring(4, 1.2, bounding_radius=1.5)

    def test_multi_ring_counts(self):
        cams = multi_ring(7, 3.0, [0.0, 30.0])
        el = [round(math.degrees(math.asin(c.center[2] / 3.0))) for c in cams]
        assert el.count(0) == 4 and el.count(30) == 3

    def test_multi_ring_single_view_rings(self):
        assert len(multi_ring(2, 3.0, [0.0, 30.0])) == 2
        with pytest.raises(ValueError):
            multi_ring(1, 3.0, [0.0])


class TestPixelRay:
    CAM = camera_ring(2, 3.0, 20.0, intrinsics=default_intrinsics(64, 64, 40.0))[0]

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for px, py in rng.uniform(0, 64, (50, 2)):
            assert np.linalg.norm(pixel_ray(self.CAM, px, py).direction) == pytest.approx(1.0)

    def test_adjacent_pixel_divergence(self):
        c = self.CAM
        a = pixel_ray(c, c.cx + 1, c.cy).direction
        b = pixel_ray(c, c.cx - 1, c.cy).direction
        angle = math.acos(np.clip(a @ b, -1, 1)) / 2
        assert angle == pytest.approx(math.atan(1 / c.fx), rel=1e-9)
        assert angle == pytest.approx(1 / c.fx, rel=1e-3)

    @pytest.mark.parametrize("px,py", [(-0.1, 3), (64, 3), (3, 64), (3, -1)])
    def test_out_of_range(self, px, py):
        with pytest.raises(ValueError):
            pixel_ray(self.CAM, px, py)


class TestCamera:
    def test_rejects_bad_pose(self):
        with pytest.raises(ValueError):
            Camera(10, 10, 5, 5, 10, 10, np.diag([1.0, 1.0, 1.1]), np.zeros(3))
        with pytest.raises(ValueError):
            Camera(0, 10, 5, 5, 10, 10, np.eye(3), np.zeros(3))

    def test_dict_round_trip(self):
        c = camera_ring(3, 3.0, 20.0)[1]
        again = Camera.from_dict(json.loads(json.dumps(c.to_dict())))
        np.testing.assert_allclose(again.rotation, c.rotation, atol=1e-12)
        np.testing.assert_allclose(again.translation, c.translation, atol=1e-12)
        assert (again.fx, again.cx, again.width) == (c.fx, c.cx, c.width)


class TestGroundTruth:
    def test_head_on_centre_pixel(self):
        # odd size puts a pixel centre exactly on the principal point
        cam = camera_ring(2, 3.0, 0.0, intrinsics=default_intrinsics(33, 33, 40.0),
                          bounding_radius=1.5)[0]
        ds = render_ground_truth(RED, [cam])
        np.testing.assert_array_equal(ds.images[0][16, 16], [255, 0, 0])
        rgb, _, _ = trace_image(RED, HeadlightModel(RED), cam)
        np.testing.assert_allclose(rgb[16, 16], [1.0, 0.0, 0.0], atol=1e-6)

    def test_miss_pixels_black(self):
        cam = camera_ring(2, 3.0, 20.0, intrinsics=default_intrinsics(48, 48, 60.0),
                          bounding_radius=1.5)[0]
        ds = render_ground_truth(UNIT, [cam])
        miss = ~ds.masks[0]
        assert miss.any() and ds.masks[0].any()
        np.testing.assert_array_equal(ds.images[0][miss], 0)
        assert ds.images[0][~miss].max() > 0

    def test_mask_fraction_matches_projected_disk(self):
        res = 128
        cam = camera_ring(2, 3.0, 20.0, intrinsics=default_intrinsics(res, res, 40.0),
                          bounding_radius=1.5)[0]
        ds = render_ground_truth(UNIT, [cam])
        # silhouette cone half-angle asin(1/3) projects to a disk of radius f tan(.)
        r_px = cam.fx * math.tan(math.asin(1 / 3))
        predicted = math.pi * r_px ** 2 / res ** 2
        assert ds.masks[0].mean() == pytest.approx(predicted, rel=0.05)

    def test_hit_points_on_surface(self):
        scene = Scene(Difference(Box((0, 0, 0), (0.7, 0.7, 0.7)), Sphere((0, 0, 0.7), 0.5)), 1.5)
        cam = camera_ring(2, 3.0, 30.0, intrinsics=default_intrinsics(40, 40, 50.0),
                          bounding_radius=1.5)[0]
        _, mask, depth = trace_image(scene, HeadlightModel(scene), cam)
        o, d = cam.pixel_rays()
        hit = mask.ravel()
        pts = o[hit] + depth.ravel()[hit, None] * d[hit]
        assert hit.sum() > 100
        assert np.max(np.abs(scene.sdf(pts))) < 1e-4

    def test_deterministic(self):
        cams = camera_ring(3, 3.0, 20.0, intrinsics=default_intrinsics(24, 24, 50.0),
                           bounding_radius=1.5)
        a = render_ground_truth(UNIT, cams, seed=4)
        b = render_ground_truth(UNIT, cams, seed=4)
        for x, y in zip(a.images, b.images):
            np.testing.assert_array_equal(x, y)


class TestDatasetIO:
    @pytest.fixture
    def dataset(self):
        cams = camera_ring(3, 3.0, 20.0, intrinsics=default_intrinsics(16, 12, 50.0),
                           bounding_radius=1.5)
        return render_ground_truth(UNIT, cams, seed=9, scene_path="sphere.json")

    def test_round_trip(self, tmp_path, dataset):
        save_dataset(dataset, tmp_path / "d")
        again = load_dataset(tmp_path / "d")
        assert (again.seed, again.scene_path, again.bounding_radius) == (9, "sphere.json", 1.5)
        for a, b in zip(dataset.images, again.images):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(dataset.masks, again.masks):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(dataset.cameras, again.cameras):
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-12)
            np.testing.assert_allclose(a.translation, b.translation, atol=1e-12)

    def test_missing_mask_file(self, tmp_path, dataset):
        save_dataset(dataset, tmp_path / "d")
        (tmp_path / "d" / "masks" / "001.ppm").unlink()
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "d")

    def test_without_masks(self, tmp_path, dataset):
        dataset.masks = None
        save_dataset(dataset, tmp_path / "d")
        assert not load_dataset(tmp_path / "d").has_masks

    def test_camera_key_order_irrelevant(self, tmp_path, dataset):
        save_dataset(dataset, tmp_path / "d")
        path = tmp_path / "d" / "cameras.json"
        cams = json.loads(path.read_text())
        path.write_text(json.dumps([dict(reversed(list(c.items()))) for c in cams]))
        again = load_dataset(tmp_path / "d")
        np.testing.assert_allclose(again.cameras[2].rotation, dataset.cameras[2].rotation,
                                   atol=1e-12)
        np.testing.assert_allclose(again.cameras[2].translation, dataset.cameras[2].translation,
                                   atol=1e-12)

    def test_version_mismatch(self, tmp_path, dataset):
        save_dataset(dataset, tmp_path / "d")
        meta_path = tmp_path / "d" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["version"] = 99
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "d")

    def test_corrupt_files(self, tmp_path, dataset):
        save_dataset(dataset, tmp_path / "d")
        (tmp_path / "d" / "cameras.json").write_text("[{")
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "d")
        save_dataset(dataset, tmp_path / "e")
        img = tmp_path / "e" / "images" / "000.ppm"
        img.write_bytes(img.read_bytes()[:-10])
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "e")

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
        write_ppm(tmp_path / "a.ppm", rgb)
        write_ppm(tmp_path / "b.ppm", gray)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
        np.testing.assert_array_equal(read_ppm(tmp_path / "b.ppm"), gray)
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
