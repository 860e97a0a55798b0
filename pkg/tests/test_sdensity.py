from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neusdf import sdensity
from neusdf.field import Plane, Ray, Scene, Sphere
from neusdf.sdensity import SDensityParams

PLANE = Scene(Plane((0, 0, 1), 0.0), bounding_radius=5.0)


class TestParams:
    @pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
    def test_rejects_non_positive(self, bad):
        with pytest.raises(ValueError):
            SDensityParams(bad)

    def test_accepts_params_or_float(self):
        assert sdensity.sigmoid(0.1, SDensityParams(10.0)) == sdensity.sigmoid(0.1, 10.0)


class TestSigmoid:
    def test_half_at_zero(self):
        for s in (0.1, 1.0, 1e6):
            assert sdensity.sigmoid(0.0, s) == 0.5

    def test_closed_form(self):
        assert sdensity.sigmoid(0.1, 10.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), rel=1e-12)
        assert sdensity.sigmoid(0.1, 10.0) == pytest.approx(0.731059, abs=1e-6)

    def test_extreme_underflow_is_clean(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            v = sdensity.sigmoid(-5.0, 1e4)
        assert v >= 0.0 and np.isfinite(v)

    def test_symmetry_and_monotonicity(self):
        x = np.linspace(-3, 3, 2001)
        phi = sdensity.sigmoid(x, 7.0)
        np.testing.assert_allclose(sdensity.sigmoid(-x, 7.0), 1.0 - phi, atol=1e-12)
        assert np.all(np.diff(phi) > 0)

    def test_log_sigmoid_consistent(self):
        x = np.linspace(-1, 1, 101)
        np.testing.assert_allclose(np.exp(sdensity.log_sigmoid(x, 5.0)), sdensity.sigmoid(x, 5.0),
                                   rtol=1e-12)


class TestLogisticPdf:
    def test_peak_value(self):
        assert sdensity.logistic_pdf(0.0, 4.0) == pytest.approx(1.0)

    def test_closed_form(self):
        expected = 10 * math.exp(-2) / (1 + math.exp(-2)) ** 2
        assert sdensity.logistic_pdf(0.2, 10.0) == pytest.approx(expected, rel=1e-12)
        assert sdensity.logistic_pdf(0.2, 10.0) == pytest.approx(1.04994, abs=1e-5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 50), st.floats(0.1, 1e3))
    def test_even(self, x, s):
        assert sdensity.logistic_pdf(x, s) == pytest.approx(sdensity.logistic_pdf(-x, s), rel=1e-12)

    def test_is_derivative_of_sigmoid(self):
        s = 3.0
        x = np.linspace(-20, 20, 401) / s
        h = 1e-5 / s
        fd = (sdensity.sigmoid(x + h, s) - sdensity.sigmoid(x - h, s)) / (2 * h)
        np.testing.assert_allclose(sdensity.logistic_pdf(x, s), fd, rtol=1e-6, atol=1e-9)


class TestDensities:
    def test_s_density_on_surface(self):
        scene = Scene(Sphere((0, 0, 0), 1.0))
        assert sdensity.s_density(scene, (1, 0, 0), 8.0) == pytest.approx(2.0)

    def test_s_density_offset_point(self):
        scene = Scene(Sphere((0, 0, 0), 1.0))
        assert sdensity.s_density(scene, (1.2, 0, 0), 10.0) == pytest.approx(1.04994, abs=1e-5)

    def test_s_density_far_tail(self):
        scene = Scene(Sphere((0, 0, 0), 1.0))
        v = sdensity.s_density(scene, (101, 0, 0), 10.0)
        assert np.isfinite(v) and v < 1e-300

    def test_naive_density(self):
        ray = Ray((0, 0, 2), (0, 0, -1))
        assert sdensity.naive_density(PLANE, ray, 2.0, 40.0) == pytest.approx(10.0)
        a = sdensity.naive_density(PLANE, ray, 2.0 - 0.03, 40.0)
        b = sdensity.naive_density(PLANE, ray, 2.0 + 0.03, 40.0)
        assert a == pytest.approx(b, rel=1e-12)

    def test_naive_density_matches_s_density(self):
        rng = np.random.default_rng(0)
        scene = Scene(Sphere((0.1, 0, 0), 0.8), 2.0)
        for _ in range(20):
            ray = Ray(rng.normal(size=3), rng.normal(size=3))
            t = rng.uniform(0, 2, 5)
            assert np.array_equal(sdensity.naive_density(scene, ray, t, 30.0),
                                  sdensity.s_density(scene, ray.at(t), 30.0))

    def test_opaque_density_at_crossing(self):
        ray = Ray((0, 0, 2), (0, 0, -1))
        assert sdensity.opaque_density(PLANE, ray, 2.0, 50.0) == pytest.approx(25.0)

    def test_opaque_density_oblique(self):
        # cos(theta) = -0.5 between the ray and the normal
        d = np.array([math.sqrt(3) / 2, 0.0, -0.5])
        ray = Ray((0, 0, 0) - 2.0 * d, d)
        assert sdensity.opaque_density(PLANE, ray, 2.0, 50.0) == pytest.approx(12.5)

    def test_opaque_density_zero_when_exiting(self):
        ray = Ray((0, 0, -2), (0, 0, 1))
        t = np.linspace(0, 4, 41)
        assert np.all(sdensity.opaque_density(PLANE, ray, t, 50.0) == 0.0)

    def test_opaque_density_planar_identity(self):
        d = np.array([0.6, 0.0, -0.8])
        ray = Ray((0, 0, 1.0), d)
        s = 20.0
        t = np.linspace(0.5, 2.0, 50)
        f = PLANE.sdf(ray.at(t))
        expected = 0.8 * sdensity.logistic_pdf(f, s) / sdensity.sigmoid(f, s)
        np.testing.assert_allclose(sdensity.opaque_density(PLANE, ray, t, s), expected, rtol=1e-10)

    def test_opaque_density_non_negative(self):
        rng = np.random.default_rng(1)
        scene = Scene(Sphere((0, 0, 0), 0.7), 2.0)
        for _ in range(20):
            ray = Ray(rng.normal(size=3) * 2, rng.normal(size=3))
            rho = sdensity.opaque_density(scene, ray, np.linspace(0, 4, 100), 100.0)
            assert np.all(rho >= 0) and np.all(np.isfinite(rho))

    def test_opaque_density_deep_inside_is_finite(self):
        ray = Ray((0, 0, 2), (0, 0, -1))
        rho = sdensity.opaque_density(PLANE, ray, 50.0, 1e6)
        assert np.isfinite(rho) and rho == pytest.approx(1e6)
