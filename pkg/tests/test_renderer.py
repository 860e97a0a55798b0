from __future__ import annotations

import numpy as np
import pytest

from neusdf import renderer
from neusdf.field import Difference, Ray, Scene, Sphere, ray_sphere_clip
from neusdf.renderer import (RaySampleSet, alpha_from_sdf, composite, discrete_alpha,
                             hierarchical_sample, quadrature_alpha, render_ray, render_rays,
                             weight_curve)

from _scenes import plane_ray, two_slab_ray, two_slab_scene

UNIT = Scene(Sphere((0, 0, 0), 1.0), bounding_radius=1.5)


def _red(points, normals, view):
    out = np.zeros(points.shape[:-1] + (3,))
    out[..., 0] = 1.0
    return out


class TestRaySampleSet:
    def test_mid_points_and_lengths(self):
        s = RaySampleSet([0.0, 1.0, 3.0])
        np.testing.assert_array_equal(s.mid_ts, [0.5, 2.0])
        np.testing.assert_array_equal(s.section_lengths, [1.0, 2.0])
        assert len(s) == 2

    @pytest.mark.parametrize("ts", [[0.0], [0.0, 0.0], [1.0, 0.5]])
    def test_rejects_bad_sections(self, ts):
        with pytest.raises(ValueError):
            RaySampleSet(ts)


class TestWeightCurve:
    def test_ours_peaks_at_surface(self):
        scene, ray, t_star = plane_ray(0.0)
        grid = np.linspace(t_star - 0.5, t_star + 0.5, 4096)
        curve = weight_curve(scene, ray, 100.0, "ours", grid)
        assert abs(curve.argmax_t() - t_star) <= grid[1] - grid[0]

    def test_naive_peaks_before_surface(self):
        scene, ray, t_star = plane_ray(0.0)
        grid = np.linspace(t_star - 0.5, t_star + 0.5, 4096)
        curve = weight_curve(scene, ray, 100.0, "naive", grid)
        assert curve.argmax_t() < t_star - (grid[1] - grid[0])

    def test_normalized_integrates_to_one(self):
        scene = two_slab_scene()
        ray, _, _ = two_slab_ray()
        near, far, _ = ray_sphere_clip(ray.origin, ray.direction, scene.bounding_radius)
        grid = np.linspace(float(near), float(far), 200001)
        curve = weight_curve(scene, ray, 200.0, "normalized", grid)
        assert curve.integral() == pytest.approx(1.0, abs=1e-4)
        assert np.all(curve.w >= 0)

    def test_ours_non_negative(self):
        scene = two_slab_scene()
        ray, _, _ = two_slab_ray()
        curve = weight_curve(scene, ray, 300.0, "ours", np.linspace(1.6, 4.4, 3001))
        assert np.all(curve.w >= 0)

    def test_rejects_degenerate_grid(self):
        scene, ray, _ = plane_ray(0.0)
        with pytest.raises(ValueError):
            weight_curve(scene, ray, 100.0, "ours", [2.0])
        with pytest.raises(ValueError):
            weight_curve(scene, ray, 100.0, "ours", [2.0, 1.9])

    def test_rejects_grid_outside_clip(self):
        scene, ray, _ = plane_ray(0.0)
        with pytest.raises(ValueError):
            weight_curve(scene, ray, 100.0, "ours", np.linspace(0.0, 2.0, 10))

    def test_rejects_unknown_kind(self):
        scene, ray, _ = plane_ray(0.0)
        with pytest.raises(ValueError):
            weight_curve(scene, ray, 100.0, "other", np.linspace(1.8, 2.2, 10))

    def test_tie_break_prefers_smaller_t(self):
        c = renderer.WeightCurve(np.array([0.0, 1.0, 2.0]), np.array([1.0, 2.0, 2.0]), "ours")
        assert c.argmax_t() == 1.0


class TestQuadrature:
    def test_polynomial(self):
        assert renderer.adaptive_trapezoid(lambda t: t ** 3, 0.0, 2.0) == pytest.approx(4.0,
                                                                                        abs=1e-7)

    def test_sharp_peak(self):
        s = 1000.0
        val = renderer.adaptive_trapezoid(
            lambda t: s * np.exp(-s * np.abs(t)) / (1 + np.exp(-s * np.abs(t))) ** 2, -1.0, 1.0)
        assert val == pytest.approx(np.tanh(s / 2), abs=1e-7)

    def test_empty_interval(self):
        assert renderer.adaptive_trapezoid(np.cos, 1.0, 1.0) == 0.0


class TestDiscreteAlpha:
    def test_closed_form_example(self):
        a = alpha_from_sdf(np.array([0.1, -0.1]), 10.0)
        assert a[0] == pytest.approx(0.632121, abs=1e-6)
        phi = 1 / (1 + np.exp(-1.0))
        assert a[0] == pytest.approx((phi - (1 - phi)) / phi, rel=1e-12)

    def test_flat_section_is_transparent(self):
        assert alpha_from_sdf(np.array([0.2, 0.2]), 10.0)[0] == 0.0

    def test_exiting_section_is_clipped(self):
        assert alpha_from_sdf(np.array([-0.1, 0.1]), 10.0)[0] == 0.0

    def test_deep_inside_is_finite(self):
        a = alpha_from_sdf(np.array([-50.0, -50.1]), 1e4)
        assert np.all(np.isfinite(a)) and np.all((a >= 0) & (a <= 1))

    def test_matches_quadrature_on_monotone_sections(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ray = Ray((0, 0, -3.0) + rng.uniform(-0.3, 0.3, 3) * [1, 1, 0], (0, 0, 1))
            t0 = rng.uniform(1.6, 2.1)
            t1 = t0 + rng.uniform(0.001, 0.2)
            s = float(10 ** rng.uniform(1, 3))
            d = discrete_alpha(UNIT, ray, RaySampleSet([t0, t1]), s)[0]
            assert abs(d - quadrature_alpha(UNIT, ray, t0, t1, s)) < 1e-6

    def test_pure_exit_quadrature_is_zero(self):
        ray = Ray((0, 0, 0), (0, 0, 1))
        assert quadrature_alpha(UNIT, ray, 0.5, 1.5, 50.0) == 0.0

    def test_dip_section_quadrature_dominates(self):
        # the section enters and leaves the sphere
        ray = Ray((0, 0.9, -3), (0, 0, 1))
        t0, t1 = 2.0, 4.0
        d = discrete_alpha(UNIT, ray, RaySampleSet([t0, t1]), 30.0)[0]
        assert quadrature_alpha(UNIT, ray, t0, t1, 30.0) >= d

    def test_quadrature_rejects_reversed_interval(self):
        with pytest.raises(ValueError):
            quadrature_alpha(UNIT, Ray((0, 0, -3), (0, 0, 1)), 2.0, 1.0, 10.0)


class TestComposite:
    def test_single_opaque_sample(self):
        c, o, w = composite([1.0], [[0.3, 0.5, 0.7]])
        np.testing.assert_allclose(c, [0.3, 0.5, 0.7])
        assert o == 1.0

    def test_two_samples(self):
        c, o, w = composite([0.5, 1.0], [[1, 1, 1], [0, 0, 0]])
        np.testing.assert_allclose(c, [0.5, 0.5, 0.5])
        assert o == 1.0
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_transparent(self):
        c, o, _ = composite(np.zeros(5), np.ones((5, 3)))
        np.testing.assert_array_equal(c, 0.0)
        assert o == 0.0

    def test_conservation(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(100, 64))
        _, o, w = composite(a, rng.uniform(size=(100, 64, 3)))
        np.testing.assert_allclose(o, w.sum(axis=-1))
        assert np.all(o <= 1 + 1e-6) and np.all(w >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            composite(np.zeros(3), np.zeros((4, 3)))


class TestHierarchicalSampling:
    def test_sample_count(self):
        s = hierarchical_sample(UNIT, Ray((0, 0, -3), (0, 0, 1)), np.random.default_rng(0))
        assert len(s.section_ts) == 129 and len(s.mid_ts) == 128

    def test_within_clip(self):
        ray = Ray((0.2, 0.1, -3), (0, 0, 1))
        near, far, _ = ray_sphere_clip(ray.origin, ray.direction, 1.5)
        s = hierarchical_sample(UNIT, ray, np.random.default_rng(0))
        assert s.section_ts[0] == pytest.approx(float(near))
        assert s.section_ts[-1] == pytest.approx(float(far))

    def test_deterministic(self):
        ray = Ray((0.2, 0.1, -3), (0, 0, 1))
        a = hierarchical_sample(UNIT, ray, np.random.default_rng(7))
        b = hierarchical_sample(UNIT, ray, np.random.default_rng(7))
        np.testing.assert_array_equal(a.section_ts, b.section_ts)

    def test_empty_scene_falls_back_to_uniform(self):
        far_away = Scene(Sphere((100, 0, 0), 0.5), bounding_radius=1.5)
        hist = []
        ray = Ray((0, 0, -3), (0, 0, 1))
        renderer.hierarchical_sample_batch(far_away.sdf, ray.origin[None], ray.direction[None],
                                           np.array([1.5]), np.array([4.5]),
                                           np.random.default_rng(0), history=hist)
        assert len(hist) == 4
        for proposals in hist:
            gaps = np.diff(np.sort(proposals[0]))
            # stratified uniform draws cover the whole segment
            assert proposals.min() >= 1.5 and proposals.max() <= 4.5
            assert gaps.max() < 2 * 3.0 / 16

    def test_miss_rejected(self):
        with pytest.raises(ValueError):
            hierarchical_sample(UNIT, Ray((0, 5, -3), (0, 0, 1)), np.random.default_rng(0))

    def test_final_round_concentrates_near_surface(self):
        # the finest round (s = 512) concentrates where a learned s = 500 would
        rng = np.random.default_rng(2)
        fractions = []
        for _ in range(20):
            o = np.array([0, 0, -3.0]) + rng.uniform(-0.3, 0.3, 3) * [1, 1, 0]
            hist = []
            renderer.hierarchical_sample_batch(UNIT.sdf, o[None], np.array([[0, 0, 1.0]]),
                                               *[np.atleast_1d(v) for v in ray_sphere_clip(
                                                   o, np.array([0, 0, 1.0]), 1.5)[:2]],
                                               rng, history=hist)
            t_star = -o[2] - np.sqrt(1 - o[0] ** 2 - o[1] ** 2)
            fractions.append(np.mean(np.abs(hist[-1] - t_star) < 3 / 500))
        assert np.mean(fractions) >= 0.6


class TestRender:
    def test_opaque_red_sphere(self):
        out = render_ray(UNIT, _red, Ray((0, 0, -3), (0, 0, 1)), 1000.0,
                         np.random.default_rng(0))
        np.testing.assert_allclose(out.color, [1, 0, 0], atol=0.02)
        assert out.opacity > 0.98
        assert out.expected_depth == pytest.approx(2.0, abs=0.01)
        assert out.opacity == pytest.approx(out.weights.sum())

    def test_miss(self):
        out = render_ray(UNIT, _red, Ray((0, 5, -3), (0, 0, 1)), 1000.0,
                         np.random.default_rng(0))
        np.testing.assert_array_equal(out.color, 0.0)
        assert out.opacity == 0.0

    def test_batch_determinism_and_misses(self):
        o = np.array([[0, 0, -3.0], [0, 5, -3.0], [0.3, 0.2, -3.0]])
        d = np.tile([0, 0, 1.0], (3, 1))
        a = render_rays(UNIT, _red, o, d, 200.0, np.random.default_rng(3))
        b = render_rays(UNIT, _red, o, d, 200.0, np.random.default_rng(3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert a[1][1] == 0.0 and a[1][0] > 0.98

    def test_front_surface_dominates(self):
        scene = two_slab_scene()
        ray, t_front, t_back = two_slab_ray()

        def front_red(points, normals, view):
            out = np.zeros(points.shape[:-1] + (3,))
            out[..., 0] = points[..., 2] > 0.0
            out[..., 2] = points[..., 2] <= 0.0
            return out

        out = render_ray(scene, front_red, ray, 1000.0, np.random.default_rng(0))
        mid = out.samples.mid_ts
        front = out.weights[mid < 0.5 * (t_front + t_back)].sum()
        assert front > 0.9 * out.weights.sum()
        assert out.color[0] > 0.9

    def test_csg_scene_renders(self):
        scene = Scene(Difference(Sphere((0, 0, 0), 1.0), Sphere((0, 0, -1), 0.5)), 1.5)
        out = render_ray(scene, _red, Ray((0, 0, -3), (0, 0, 1)), 500.0,
                         np.random.default_rng(0))
        # the first crossing is the cavity wall at z = -0.5
        assert out.expected_depth == pytest.approx(2.5, abs=0.02)
